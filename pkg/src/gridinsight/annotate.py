"""Insight registry, similarity / KNN annotation and AP-based evaluation.

Unsupervised annotation scores sample i against insight prototype p_j through
a Gaussian kernel on the Euclidean distance between mean vectors:

    s_i^j = exp(-d_ij^2 / (2 h^2)),

so scores live in (0, 1] and decrease strictly with distance; the bandwidth
defaults to the median prototype-to-sample distance, which makes the scores
scale-free. The semi-supervised route builds per-label KNN voting on frozen
mean vectors. Ranking quality is measured by average precision per label and
its mean over labels (plus mean per-label accuracy for thresholded bits).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import PgpmDataset, split_folds
from .latent import Representation, average_representation, extract_batch, mean_vector


@dataclass
class InsightRecord:
    id: str
    name: str
    description: str
    prototype: Representation
    thumbnail: np.ndarray | None = None  # reconstructed pixel grid

    def to_dict(self) -> dict:
        return {
            "id": self.id, "name": self.name, "description": self.description,
            "prototype": self.prototype.to_dict(),
            "thumbnail": None if self.thumbnail is None else self.thumbnail.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InsightRecord":
        thumb = d.get("thumbnail")
        return cls(d["id"], d["name"], d.get("description", ""),
                   Representation.from_dict(d["prototype"]),
                   None if thumb is None else np.asarray(thumb, dtype=np.float64))


class InsightRegistry:
    """Ordered registry of named insights with dimension checking."""

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._records: dict[str, InsightRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def add(self, record: InsightRecord) -> None:
        if record.id in self._records:
            raise ValueError(f"duplicate insight id {record.id!r}")
        self._check_dim(record)
        self._records[record.id] = record

    def update(self, record: InsightRecord) -> None:
        if record.id not in self._records:
            raise KeyError(record.id)
        self._check_dim(record)
        self._records[record.id] = record

    def remove(self, insight_id: str) -> None:
        if insight_id not in self._records:
            raise KeyError(insight_id)
        del self._records[insight_id]

    def get(self, insight_id: str) -> InsightRecord:
        if insight_id not in self._records:
            raise KeyError(insight_id)
        return self._records[insight_id]

    def list(self) -> list[InsightRecord]:
        return list(self._records.values())

    def _check_dim(self, record: InsightRecord) -> None:
        if record.prototype.dim != self.dim:
            raise ValueError(
                f"insight {record.id!r}: prototype dimension {record.prototype.dim} "
                f"does not match registry dimension {self.dim}")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.list())

    @classmethod
    def from_jsonl(cls, text: str, dim: int) -> "InsightRegistry":
        registry = cls(dim)
        for line in text.strip().splitlines():
            if line:
                registry.add(InsightRecord.from_dict(json.loads(line)))
        return registry


@dataclass
class AnnotationResult:
    sample_id: str
    scores: np.ndarray  # K floats in [0, 1]
    bits: np.ndarray    # K booleans, bits[j] == (scores[j] >= threshold)

    def to_dict(self) -> dict:
        return {"id": self.sample_id, "scores": self.scores.tolist(),
                "bits": [int(b) for b in self.bits]}


def similarity_kernel(distance, bandwidth: float):
    """exp(-d^2 / (2 h^2)): 1 at distance zero, strictly decreasing."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    d = np.asarray(distance, dtype=np.float64)
    return np.exp(-(d**2) / (2.0 * bandwidth**2))


def _prototype_distances(means: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    diff = means[:, None, :] - prototypes[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=2))


def unsupervised_annotate(reprs: list[Representation], registry: InsightRegistry,
                          bandwidth: float | None = None,
                          threshold: float = 0.5) -> list[AnnotationResult]:
    """Annotate every representation against every registered insight."""
    if len(registry) == 0:
        raise ValueError("registry is empty")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    records = registry.list()
    means = np.stack([mean_vector(r) for r in reprs])
    prototypes = np.stack([mean_vector(rec.prototype) for rec in records])
    d = _prototype_distances(means, prototypes)
    if bandwidth is None:
        bandwidth = float(np.median(d))
        if bandwidth <= 0:
            bandwidth = 1.0
    scores = similarity_kernel(d, bandwidth)
    return [AnnotationResult(r.source_id or f"sample-{i:05d}", scores[i],
                             scores[i] >= threshold)
            for i, r in enumerate(reprs)]


def knn_semi_supervised(labeled_vectors: np.ndarray, labeled_bits: np.ndarray,
                        unlabeled_vectors: np.ndarray,
                        k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-label KNN voting on mean vectors.

    Returns (bits, scores): score[j] is the fraction of the k nearest labeled
    neighbors (Euclidean, ties broken by lower sample index) carrying label j;
    the predicted bit is score >= 0.5.
    """
    labeled_vectors = np.asarray(labeled_vectors, dtype=np.float64)
    labeled_bits = np.asarray(labeled_bits, dtype=bool)
    unlabeled_vectors = np.asarray(unlabeled_vectors, dtype=np.float64)
    n = labeled_vectors.shape[0]
    if n == 0:
        raise ValueError("labeled set is empty")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    d2 = (np.sum(unlabeled_vectors**2, axis=1)[:, None]
          + np.sum(labeled_vectors**2, axis=1)[None, :]
          - 2.0 * unlabeled_vectors @ labeled_vectors.T)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    scores = labeled_bits[order].mean(axis=1)
    return scores >= 0.5, scores


def average_precision(scores, truth) -> float:
    """Ranking AP: precision accumulated at each positive, score-descending
    order with index tie-break."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ValueError("scores and truth must be equal-length vectors")
    positives = int(truth.sum())
    if positives == 0:
        raise ValueError("average precision undefined without positives")
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranked = truth[order]
    cumulative = np.cumsum(ranked)
    ranks = np.arange(1, len(scores) + 1)
    return float(np.sum(cumulative[ranked] / ranks[ranked]) / positives)


def mean_average_precision(per_class_ap) -> float:
    values = [v for v in per_class_ap if not np.isnan(v)]
    if not values:
        raise ValueError("no classes with defined AP")
    return float(np.mean(values))


def mean_accuracy(predicted_bits: np.ndarray, truth: np.ndarray) -> float:
    """Per-label accuracy averaged over labels (the mA companion metric)."""
    predicted_bits = np.asarray(predicted_bits, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted_bits.shape != truth.shape:
        raise ValueError("shape mismatch")
    return float((predicted_bits == truth).mean(axis=0).mean())


# ---------------------------------------------------------------------------
# cross-validated evaluation
# ---------------------------------------------------------------------------

@dataclass
class CrossValResult:
    method: str
    folds: int
    label_fraction: float
    per_class_mean: np.ndarray
    per_class_std: np.ndarray
    map_mean: float
    map_std: float
    ma_mean: float
    ma_std: float
    fold_maps: list[float] = field(default_factory=list)

    def format_table(self, class_names) -> str:
        header = ["method"] + [f"P{j + 1}" for j in range(len(class_names))] + ["mAP"]
        cells = [self.method]
        for m, s in zip(self.per_class_mean, self.per_class_std):
            cells.append("--" if np.isnan(m) else f"{100 * m:.1f}+-{100 * s:.1f}")
        cells.append(f"{100 * self.map_mean:.1f}+-{100 * self.map_std:.1f}")
        widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
        line = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths))
        return line(header) + "\n" + line(cells)


def single_label_prototypes(reps: list[Representation], labels: np.ndarray,
                            indices: np.ndarray) -> list[Representation]:
    """Average representation of the single-label samples of each class.

    Falls back to every sample carrying the label when a class has no
    single-label examples in the given index set.
    """
    labels = np.asarray(labels, dtype=bool)
    k = labels.shape[1]
    prototypes = []
    for j in range(k):
        exact = [i for i in indices if labels[i, j] and labels[i].sum() == 1]
        pool = exact or [i for i in indices if labels[i, j]]
        if not pool:
            raise ValueError(f"no samples carry label {j}; cannot build a prototype")
        prototypes.append(average_representation([reps[i] for i in pool]))
    return prototypes


def cross_validate(dataset: PgpmDataset, model, method: str, folds: int = 5,
                   label_fraction: float = 1.0, seed: int = 0, knn_k: int = 15,
                   reps: list[Representation] | None = None) -> CrossValResult:
    """Per-fold fit/evaluate loop for either annotation method.

    ``unsupervised``: prototypes are built on the train folds (single-label
    averages), scores are kernel similarities on the held-out fold.
    ``knn``: the train folds act as the labeled pool, subsampled to
    ``label_fraction`` with a seeded generator; scores are neighbor votes.
    ``random``: seeded uniform scores, the reference floor.
    """
    if method not in ("unsupervised", "knn", "random"):
        raise ValueError(f"unknown annotation method {method!r}")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if not 0.0 < label_fraction <= 1.0:
        raise ValueError("label_fraction must be in (0, 1]")
    if reps is None:
        reps = extract_batch(model, dataset.grids, ids=dataset.ids)
    labels = dataset.labels
    k_classes = labels.shape[1]
    means = np.stack([mean_vector(r) for r in reps])
    assignment = split_folds(labels, folds, seed)

    per_class = np.full((folds, k_classes), np.nan)
    fold_maps, fold_mas = [], []
    for f in range(folds):
        test_idx = np.flatnonzero(assignment == f)
        train_idx = np.flatnonzero(assignment != f)
        rng = np.random.default_rng(seed * 100003 + f)
        if method == "unsupervised":
            prototypes = single_label_prototypes(reps, labels, train_idx)
            proto_means = np.stack([mean_vector(p) for p in prototypes])
            d = _prototype_distances(means[test_idx], proto_means)
            h = float(np.median(_prototype_distances(means[train_idx], proto_means)))
            scores = similarity_kernel(d, h if h > 0 else 1.0)
            bits = scores >= 0.5
        elif method == "knn":
            n_labeled = max(1, int(round(label_fraction * len(train_idx))))
            chosen = train_idx[rng.permutation(len(train_idx))[:n_labeled]]
            kk = min(knn_k, len(chosen))
            bits, scores = knn_semi_supervised(means[chosen], labels[chosen],
                                               means[test_idx], kk)
        else:
            scores = rng.uniform(size=(len(test_idx), k_classes))
            bits = scores >= 0.5
        truth = labels[test_idx]
        aps = []
        for j in range(k_classes):
            if truth[:, j].any():
                ap = average_precision(scores[:, j], truth[:, j])
                per_class[f, j] = ap
                aps.append(ap)
        fold_maps.append(mean_average_precision(aps))
        fold_mas.append(mean_accuracy(bits, truth))

    with np.errstate(invalid="ignore"):
        class_mean = np.nanmean(per_class, axis=0)
        class_std = np.nanstd(per_class, axis=0)
    return CrossValResult(
        method=method, folds=folds, label_fraction=label_fraction,
        per_class_mean=class_mean, per_class_std=class_std,
        map_mean=float(np.mean(fold_maps)), map_std=float(np.std(fold_maps)),
        ma_mean=float(np.mean(fold_mas)), ma_std=float(np.std(fold_mas)),
        fold_maps=[float(v) for v in fold_maps])


def annotation_results_to_jsonl(results: list[AnnotationResult]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in results)
