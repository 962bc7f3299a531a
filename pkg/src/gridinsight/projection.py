"""Projection-view pipeline: t-SNE on precomputed distances, k-means++ and
blue-noise subsampling.

The pipeline projects every representation (so coordinates stay stable while
the user changes the sampling radius), clusters the 2-D embedding, then picks
a blue-noise subset purely for display.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .latent import Representation, pairwise_w2_matrix


def tsne_project(distances: np.ndarray, perplexity: float = 30.0,
                 iterations: int = 500, seed: int = 0,
                 learning_rate: float = 200.0, early_exaggeration: float = 12.0,
                 exaggeration_iters: int = 50, callback=None) -> np.ndarray:
    """Two-dimensional t-SNE embedding of a precomputed distance matrix.

    Per-point Gaussian bandwidths are binary-searched so each conditional
    distribution hits the requested perplexity; the low-dimensional kernel is
    Student-t with one degree of freedom; optimization is gradient descent
    with momentum and per-coordinate gains, with early exaggeration for the
    first ``exaggeration_iters`` iterations. Fully deterministic under seed.

    ``callback(iteration, kl)`` if given is invoked after each iteration with
    the KL divergence of the unexaggerated objective.
    """
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n:
        raise ValueError("distance matrix must be square")
    if not perplexity < n:
        raise ValueError(f"perplexity {perplexity} must be < number of points {n}")
    p = _joint_probabilities(d, perplexity)
    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iterations):
        exaggerate = early_exaggeration if it < exaggeration_iters else 1.0
        grad, kl = _kl_gradient(p * exaggerate, y)
        if callback is not None:
            _, plain_kl = (grad, kl) if exaggerate == 1.0 else _kl_gradient(p, y)
            callback(it, plain_kl)
        momentum = 0.5 if it < 250 else 0.8
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return y


def _joint_probabilities(distances: np.ndarray, perplexity: float) -> np.ndarray:
    n = distances.shape[0]
    d2 = distances.astype(np.float64) ** 2
    target_entropy = np.log(perplexity)
    cond = np.zeros((n, n))
    for i in range(n):
        d_i = np.delete(d2[i], i)
        beta_lo, beta_hi = 0.0, np.inf
        beta = 1.0
        for _ in range(64):
            w = np.exp(-d_i * beta)
            total = w.sum()
            if total <= 0:
                entropy, probs = 0.0, w
            else:
                probs = w / total
                nz = probs > 0
                entropy = -np.sum(probs[nz] * np.log(probs[nz]))
            if abs(entropy - target_entropy) < 1e-7:
                break
            if entropy > target_entropy:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else 0.5 * (beta + beta_hi)
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else 0.5 * (beta + beta_lo)
        row = np.insert(probs, i, 0.0)
        cond[i] = row
    joint = (cond + cond.T) / (2.0 * n)
    return np.maximum(joint, 1e-12)


def _kl_gradient(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    diff_sq = _pairwise_sq_coords(y)
    num = 1.0 / (1.0 + diff_sq)
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    pq = (p - q) * num
    grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
    mask = p > 1e-11
    kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return grad, kl


def _pairwise_sq_coords(y: np.ndarray) -> np.ndarray:
    norms = np.sum(y * y, axis=1)
    sq = norms[:, None] + norms[None, :] - 2.0 * (y @ y.T)
    return np.clip(sq, 0.0, None)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def kmeans(vectors: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
           wcss_trace: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeds.

    Returns (assignments, centroids); the assignments are a fixed point of
    the returned centroids. Within-cluster sum of squares is non-increasing
    across iterations (appended to ``wcss_trace`` when provided).
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_seeds(x, k, rng)
    assignments = _nearest(x, centroids)
    for _ in range(max_iter):
        if wcss_trace is not None:
            wcss_trace.append(_wcss(x, centroids, assignments))
        centroids = _update_centroids(x, assignments, centroids, k)
        new_assignments = _nearest(x, centroids)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    if wcss_trace is not None:
        wcss_trace.append(_wcss(x, centroids, assignments))
    return assignments, centroids


def _kmeanspp_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            remaining = [i for i in range(n) if i not in set(chosen)]
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, np.sum((x - x[chosen[-1]]) ** 2, axis=1))
    return x[chosen].copy()


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (np.sum(x * x, axis=1)[:, None] + np.sum(centroids * centroids, axis=1)[None, :]
          - 2.0 * x @ centroids.T)
    return np.argmin(d2, axis=1)


def _update_centroids(x, assignments, centroids, k):
    new = centroids.copy()
    counts = np.bincount(assignments, minlength=k)
    for c in range(k):
        if counts[c] > 0:
            new[c] = x[assignments == c].mean(axis=0)
        else:
            # reseed an empty cluster at the point farthest from its centroid
            far = np.argmax(np.sum((x - centroids[assignments]) ** 2, axis=1))
            new[c] = x[far]
    return new


def _wcss(x, centroids, assignments) -> float:
    return float(np.sum((x - centroids[assignments]) ** 2))


# ---------------------------------------------------------------------------
# blue-noise sampling
# ---------------------------------------------------------------------------

def blue_noise_sample(points: np.ndarray, radius: float, seed: int = 0) -> np.ndarray:
    """Greedy dart throwing: indices of a maximal subset with pairwise
    distances >= radius.

    Visit order is derived from a seeded hash of each point's coordinates,
    not from array position, so the accepted point set does not depend on
    input ordering.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be [n, d]")
    if radius < 0:
        raise ValueError("radius must be positive")
    n = pts.shape[0]
    if n == 0:
        return np.array([], dtype=np.int64)
    seed_bytes = struct.pack("<q", seed)
    keys = []
    for i in range(n):
        digest = hashlib.blake2b(seed_bytes + pts[i].tobytes(), digest_size=8).digest()
        keys.append(struct.unpack("<Q", digest)[0])
    order = sorted(range(n), key=lambda i: (keys[i], i))
    accepted: list[int] = []
    r2 = radius * radius
    kept = np.empty((0, pts.shape[1]))
    for i in order:
        if accepted:
            d2 = np.sum((kept - pts[i]) ** 2, axis=1)
            if radius > 0 and np.any(d2 < r2):
                continue
        accepted.append(i)
        kept = np.vstack([kept, pts[i]])
    return np.array(sorted(accepted), dtype=np.int64)


# ---------------------------------------------------------------------------
# full projection pipeline
# ---------------------------------------------------------------------------

@dataclass
class ProjectionResult:
    coords: np.ndarray      # [n, 2], every representation
    clusters: np.ndarray    # [n] cluster index in [0, k)
    sampled: np.ndarray     # indices chosen for display
    k: int
    radius_fraction: float
    seed: int


def compute_projection(reps: list[Representation], k: int = 6,
                       radius_fraction: float = 0.02, seed: int = 0,
                       perplexity: float = 30.0, iterations: int = 500,
                       distances: np.ndarray | None = None) -> ProjectionResult:
    """W2 distances -> t-SNE -> k-means on the embedding -> blue-noise subset.

    ``radius_fraction`` scales the blue-noise radius by the embedding's
    bounding-box diagonal so the control is resolution-independent.
    """
    n = len(reps)
    if distances is None:
        distances = pairwise_w2_matrix(reps)
    perp = min(perplexity, max(2.0, (n - 1) / 3.0))
    coords = tsne_project(distances, perplexity=perp, iterations=iterations, seed=seed)
    clusters, _ = kmeans(coords, k, seed=seed)
    span = coords.max(axis=0) - coords.min(axis=0)
    diagonal = float(np.sqrt(np.sum(span**2)))
    sampled = blue_noise_sample(coords, radius_fraction * diagonal, seed=seed)
    return ProjectionResult(coords, clusters, sampled, k, radius_fraction, seed)
