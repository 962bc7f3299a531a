"""Synthetic power-grid pixel maps with ground-truth multi-label annotations.

A pixel map is an M x T grayscale grid in [0, 1]: rows are buses sorted by
id, columns are simulation time points, intensity is normalized voltage.
Samples are composed from a smooth nominal-voltage background plus a random
subset of K insight primitives (each one a localized additive pattern on a
bus band and time window), then seeded Gaussian noise, clamped to [0, 1] and
snapped to the 8-bit lattice so the image archive round-trips losslessly.

The archive format (documented byte-exactly in the README) is a directory:

    dataset.json       dataset-level metadata (m, t, dt, k, insight names)
    samples.jsonl      one record per sample: {"id", "file", "labels"}
    images/<id>.png    8-bit grayscale, values = round(grid * 255)

External real pixel maps can be imported by laying them out the same way.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DecodeError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Pgpm:
    """One pixel map: grid[bus, time] in [0,1], column spacing dt seconds."""

    grid: np.ndarray
    dt: float
    id: str


@dataclass(frozen=True)
class InsightSpec:
    """Sampling ranges for one insight primitive (all ranges inclusive)."""

    name: str
    kind: str
    bus_start: tuple[int, int]
    band_width: tuple[int, int]
    onset: tuple[int, int]
    duration: tuple[int, int]
    magnitude: tuple[float, float]
    probability: float = 0.4


def default_insights() -> tuple[InsightSpec, ...]:
    """Six primitives covering the periodic / correlated / anomalous families.

    Each insight lives on its own characteristic bus band with modest
    placement jitter (magnitude carries most of the variation), which keeps
    the taxonomy visually distinctive. Inclusion probability 0.4 each puts
    the expected labels per sample (after resampling empty draws) at ~2.52.
    """
    return (
        InsightSpec("band_sag", "step_sag", (3, 5), (6, 8), (8, 11), (16, 20), (0.20, 0.32)),
        InsightSpec("band_surge", "step_surge", (21, 24), (5, 7), (3, 6), (20, 26), (0.20, 0.32)),
        InsightSpec("oscillation", "oscillation", (11, 14), (5, 7), (3, 6), (18, 24), (0.12, 0.20)),
        InsightSpec("blackout", "blackout", (10, 14), (4, 6), (17, 21), (6, 9), (1.0, 1.0)),
        InsightSpec("ramp_drift", "ramp_drift", (25, 28), (3, 5), (5, 9), (20, 26), (0.18, 0.30)),
        InsightSpec("coupled_flicker", "correlated_flicker", (1, 3), (2, 3), (9, 13), (8, 11), (0.14, 0.22)),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    m: int = 32
    t: int = 32
    dt: float = 0.01
    insights: tuple[InsightSpec, ...] = field(default_factory=default_insights)
    noise_sigma: float = 0.02
    background_level: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if len(self.insights) < 2:
            raise ValueError("need at least two insight generators")
        for ins in self.insights:
            if not 0.0 <= ins.probability <= 1.0:
                raise ValueError(f"{ins.name}: probability must be in [0,1]")
            if ins.kind not in PRIMITIVES:
                raise ValueError(f"{ins.name}: unknown primitive kind {ins.kind!r}")

    @property
    def k(self) -> int:
        return len(self.insights)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "insights" in d:
            d["insights"] = tuple(
                InsightSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in ins.items()})
                for ins in d["insights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# insight primitives: (band, window, magnitude) -> additive M x T pattern,
# zero outside the band x window support
# ---------------------------------------------------------------------------

def _band_window(m: int, t: int, band: tuple[int, int], window: tuple[int, int]):
    lo, hi = band
    start, end = window
    if not (0 <= lo <= hi < m):
        raise ValueError(f"empty or out-of-range bus band {band}")
    if not (0 <= start <= end < t):
        raise ValueError(f"empty or out-of-range time window {window}")
    return slice(lo, hi + 1), slice(start, end + 1)


def step_sag(m, t, band, window, magnitude, rng=None):
    """Sustained voltage drop on a bus band over the window."""
    out = np.zeros((m, t))
    rows, cols = _band_window(m, t, band, window)
    out[rows, cols] = -magnitude
    return out


def step_surge(m, t, band, window, magnitude, rng=None):
    """Sustained voltage rise (sudden increase shortly after its start time)."""
    out = np.zeros((m, t))
    rows, cols = _band_window(m, t, band, window)
    out[rows, cols] = magnitude
    return out


def oscillation(m, t, band, window, magnitude, rng=None, period: int = 8):
    """Sinusoidal stripes along time on a bus band (the periodic family).

    The phase is tied to the absolute time column, not the onset, so the
    stripes of overlapping windows line up.
    """
    out = np.zeros((m, t))
    rows, cols = _band_window(m, t, band, window)
    ticks = np.arange(window[0], window[1] + 1)
    out[rows, cols] = magnitude * np.sin(2.0 * np.pi * ticks / period)[None, :]
    return out


def blackout(m, t, band, window, magnitude, rng=None):
    """Near-zero rectangle: additive -1 forces the clamped result to ~0."""
    out = np.zeros((m, t))
    rows, cols = _band_window(m, t, band, window)
    out[rows, cols] = -1.0
    return out


def ramp_drift(m, t, band, window, magnitude, rng=None):
    """Linear downward drift from zero at onset to -magnitude at the end time."""
    out = np.zeros((m, t))
    rows, cols = _band_window(m, t, band, window)
    n_cols = window[1] - window[0] + 1
    ramp = np.linspace(0.0, 1.0, n_cols) if n_cols > 1 else np.ones(1)
    out[rows, cols] = -magnitude * ramp[None, :]
    return out


def correlated_flicker(m, t, band, window, magnitude, rng=None):
    """One noise burst replicated on the band and its vertically mirrored twin."""
    if rng is None:
        raise ValueError("correlated_flicker needs a random generator for its burst")
    out = np.zeros((m, t))
    rows, cols = _band_window(m, t, band, window)
    burst = magnitude * rng.standard_normal(window[1] - window[0] + 1)
    out[rows, cols] += burst[None, :]
    lo, hi = band
    mirror = (m - 1 - hi, m - 1 - lo)
    mrows, _ = _band_window(m, t, mirror, window)
    out[mrows, cols] += burst[None, :]
    return out


PRIMITIVES = {
    "step_sag": step_sag,
    "step_surge": step_surge,
    "oscillation": oscillation,
    "blackout": blackout,
    "ramp_drift": ramp_drift,
    "correlated_flicker": correlated_flicker,
}


def flicker_mirror_band(m: int, band: tuple[int, int]) -> tuple[int, int]:
    lo, hi = band
    return (m - 1 - hi, m - 1 - lo)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _background(m: int, t: int, level: float, rng: np.random.Generator) -> np.ndarray:
    """Per-bus nominal level plus smooth low-frequency spatial/temporal ripple.

    The smooth shapes are fixed; per-sample variation is their amplitudes.
    """
    bus_shape = np.sin(2 * np.pi * np.arange(m) / m)
    time_shape = np.sin(2 * np.pi * np.arange(t) / t + 0.5)
    a = rng.uniform(-0.03, 0.03)
    b = rng.uniform(-0.02, 0.02)
    return level + a * bus_shape[:, None] + b * time_shape[None, :]


def _sample_placement(ins: InsightSpec, m: int, t: int, rng: np.random.Generator):
    lo = int(rng.integers(ins.bus_start[0], ins.bus_start[1] + 1))
    width = int(rng.integers(ins.band_width[0], ins.band_width[1] + 1))
    hi = min(lo + width - 1, m - 1)
    onset = int(rng.integers(ins.onset[0], ins.onset[1] + 1))
    dur = int(rng.integers(ins.duration[0], ins.duration[1] + 1))
    end = min(onset + dur - 1, t - 1)
    mag = float(rng.uniform(ins.magnitude[0], ins.magnitude[1]))
    return (lo, hi), (onset, end), mag


def _quantize(grid: np.ndarray) -> np.ndarray:
    return np.round(np.clip(grid, 0.0, 1.0) * 255.0) / 255.0


class PgpmDataset:
    """Materialized sample collection; iterates as (Pgpm, label-bit-vector)."""

    def __init__(self, grids: np.ndarray, labels: np.ndarray, ids: list[str],
                 dt: float, insight_names: tuple[str, ...]):
        if grids.shape[0] != labels.shape[0] or len(ids) != grids.shape[0]:
            raise ValueError("grids, labels and ids must align")
        self.grids = grids
        self.labels = labels.astype(bool)
        self.ids = list(ids)
        self.dt = float(dt)
        self.insight_names = tuple(insight_names)

    @property
    def k(self) -> int:
        return self.labels.shape[1]

    def __len__(self) -> int:
        return self.grids.shape[0]

    def __getitem__(self, i: int) -> tuple[Pgpm, np.ndarray]:
        return Pgpm(self.grids[i], self.dt, self.ids[i]), self.labels[i]

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "PgpmDataset":
        indices = np.asarray(indices)
        return PgpmDataset(self.grids[indices], self.labels[indices],
                           [self.ids[i] for i in indices], self.dt, self.insight_names)


def generate_synthetic(spec: SyntheticSpec, n: int) -> PgpmDataset:
    """n samples, fully determined by (spec, n).

    Each sample includes every insight independently with its probability
    (draws with zero insights are rejected and redrawn), composes the selected
    primitives additively over the background, adds Gaussian pixel noise and
    clamps to [0, 1].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    k = spec.k
    probs = np.array([ins.probability for ins in spec.insights])
    grids = np.empty((n, spec.m, spec.t))
    labels = np.zeros((n, k), dtype=bool)
    ids = [f"pgpm-{i:05d}" for i in range(n)]
    for i in range(n):
        grid = _background(spec.m, spec.t, spec.background_level, rng)
        while True:
            include = rng.random(k) < probs
            if include.any():
                break
        for j, ins in enumerate(spec.insights):
            if not include[j]:
                continue
            band, window, mag = _sample_placement(ins, spec.m, spec.t, rng)
            grid = grid + PRIMITIVES[ins.kind](spec.m, spec.t, band, window, mag, rng=rng)
        grid = grid + spec.noise_sigma * rng.standard_normal((spec.m, spec.t))
        grids[i] = _quantize(grid)
        labels[i] = include
    return PgpmDataset(grids, labels, ids, spec.dt,
                       tuple(ins.name for ins in spec.insights))


# ---------------------------------------------------------------------------
# archive persistence
# ---------------------------------------------------------------------------

def save_dataset(path: str | Path, dataset: PgpmDataset) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "m": int(dataset.grids.shape[1]),
        "t": int(dataset.grids.shape[2]),
        "dt": dataset.dt,
        "k": dataset.k,
        "insight_names": list(dataset.insight_names),
        "count": len(dataset),
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(root / "samples.jsonl", "w") as fh:
        for i in range(len(dataset)):
            pixels = np.round(dataset.grids[i] * 255.0).astype(np.uint8)
            fname = f"images/{dataset.ids[i]}.png"
            Image.fromarray(pixels, mode="L").save(root / fname)
            record = {"id": dataset.ids[i], "file": fname,
                      "labels": [int(b) for b in dataset.labels[i]]}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(path: str | Path, expect_k: int | None = None) -> PgpmDataset:
    root = Path(path)
    try:
        meta = json.loads((root / "dataset.json").read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise DecodeError(f"unreadable dataset metadata at {root}: {err}") from err
    if meta.get("format_version") != FORMAT_VERSION:
        raise DecodeError(f"unsupported dataset format version {meta.get('format_version')}")
    if expect_k is not None and meta["k"] != expect_k:
        raise DecodeError(f"dataset has {meta['k']} insight labels, expected {expect_k}")
    grids, labels, ids = [], [], []
    try:
        lines = (root / "samples.jsonl").read_text().splitlines()
    except OSError as err:
        raise DecodeError(f"missing samples.jsonl in {root}") from err
    for line in lines:
        try:
            rec = json.loads(line)
            with Image.open(root / rec["file"]) as img:
                pixels = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        except (OSError, KeyError, json.JSONDecodeError) as err:
            raise DecodeError(f"corrupt sample record: {err}") from err
        if pixels.shape != (meta["m"], meta["t"]):
            raise DecodeError(f"sample {rec.get('id')}: image shape {pixels.shape} "
                              f"does not match dataset {meta['m']}x{meta['t']}")
        if len(rec["labels"]) != meta["k"]:
            raise DecodeError(f"sample {rec.get('id')}: label width mismatch")
        grids.append(pixels)
        labels.append(rec["labels"])
        ids.append(rec["id"])
    if len(grids) != meta["count"]:
        raise DecodeError(f"dataset lists {meta['count']} samples, found {len(grids)}")
    return PgpmDataset(np.array(grids), np.array(labels, dtype=bool), ids,
                       meta["dt"], tuple(meta["insight_names"]))


# ---------------------------------------------------------------------------
# fold splitting
# ---------------------------------------------------------------------------

def split_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Stratified fold assignment, one fold index per sample.

    Samples are grouped by their exact label combination; each group is
    shuffled and dealt round-robin so combinations spread evenly while global
    fold sizes differ by at most one.
    """
    labels = np.asarray(labels, dtype=bool)
    n = labels.shape[0]
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if folds > n:
        raise ValueError(f"cannot split {n} samples into {folds} folds")
    rng = np.random.default_rng(seed)
    fold_order = rng.permutation(folds)
    groups: dict[tuple, list[int]] = {}
    for i in range(n):
        groups.setdefault(tuple(labels[i].tolist()), []).append(i)
    assignment = np.empty(n, dtype=np.int64)
    cursor = 0
    for key in sorted(groups):
        members = np.array(groups[key])
        for idx in members[rng.permutation(len(members))]:
            assignment[idx] = fold_order[cursor % folds]
            cursor += 1
    return assignment
