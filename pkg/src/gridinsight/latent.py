"""Gaussian representation toolkit: geometry, interpolation, arithmetic.

A representation is the concatenated per-layer posterior (mu, sigma) of one
pixel map. Distances between representations use the 2-Wasserstein metric
between Gaussians, which for diagonal covariances reduces to

    W2^2 = sum_d (mu1_d - mu2_d)^2 + (sigma1_d - sigma2_d)^2,

and interpolation mixes means and standard deviations linearly (the diagonal
case of interpolating mean vectors and covariance square roots).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import Pgpm
from . import hvae


@dataclass
class Representation:
    """Diagonal-Gaussian latent summary of one pixel map."""

    mu: np.ndarray
    sigma: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.ndim != 1 or self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must be 1-D vectors of equal length")
        if np.any(self.sigma <= 0.0):
            raise ValueError("sigma must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def copy(self, source_id: str | None = None) -> "Representation":
        return Representation(self.mu.copy(), self.sigma.copy(), source_id)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "source_id": self.source_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Representation":
        return cls(np.asarray(d["mu"], dtype=np.float64),
                   np.asarray(d["sigma"], dtype=np.float64),
                   d.get("source_id"))


def _require_same_dim(a: Representation, b: Representation) -> None:
    if a.dim != b.dim:
        raise ValueError(f"representation dimension mismatch: {a.dim} vs {b.dim}")


def extract(model, pgpm) -> Representation:
    """Posterior parameters of one pixel map, flattened across latent layers."""
    grid = pgpm.grid if isinstance(pgpm, Pgpm) else np.asarray(pgpm, dtype=np.float64)
    g = hvae.infer(model.snapshot(), grid)
    return Representation(g.mu_vector(0), g.sigma_vector(0),
                          pgpm.id if isinstance(pgpm, Pgpm) else None)


def extract_batch(model, grids: np.ndarray, ids: list[str] | None = None,
                  batch_size: int = 64) -> list[Representation]:
    """Vectorized :func:`extract` over an [n, H, W] grid stack."""
    frozen = model.snapshot()
    out: list[Representation] = []
    for start in range(0, grids.shape[0], batch_size):
        batch = grids[start:start + batch_size]
        g = frozen.encode(Tensor(batch[:, None, :, :]))
        mus = np.concatenate([m.data for m in g.mu], axis=1)
        sigmas = np.concatenate([np.exp(0.5 * lv.data) for lv in g.logvar], axis=1)
        for i in range(batch.shape[0]):
            sid = ids[start + i] if ids is not None else None
            out.append(Representation(mus[i], sigmas[i], sid))
    return out


def mean_vector(r: Representation) -> np.ndarray:
    """The representation vector used for similarity: the per-dimension means."""
    return r.mu


def w2_squared(r1: Representation, r2: Representation) -> float:
    """Squared 2-Wasserstein distance (diagonal-covariance closed form)."""
    _require_same_dim(r1, r2)
    return float(np.sum((r1.mu - r2.mu) ** 2) + np.sum((r1.sigma - r2.sigma) ** 2))


def interpolate(r1: Representation, r2: Representation, t: float) -> Representation:
    """Mix toward ``r1``: t=1 returns r1, t=0 returns r2."""
    _require_same_dim(r1, r2)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter {t} outside [0, 1]")
    return Representation(t * r1.mu + (1.0 - t) * r2.mu,
                          t * r1.sigma + (1.0 - t) * r2.sigma)


def arithmetic(op: str, base: Representation, operand) -> Representation:
    """add / subtract another representation's mean, or scale the base mean.

    Sigma is carried over from the base unchanged: reconstruction decodes the
    mean, so composing sigmas has no visible effect and no defined semantics.
    """
    if op == "scale":
        return Representation(base.mu * float(operand), base.sigma.copy())
    if not isinstance(operand, Representation):
        raise ValueError(f"{op} needs a representation operand")
    _require_same_dim(base, operand)
    if op == "add":
        return Representation(base.mu + operand.mu, base.sigma.copy())
    if op == "subtract":
        return Representation(base.mu - operand.mu, base.sigma.copy())
    raise ValueError(f"unknown arithmetic op {op!r}")


def adjust_dimension(r: Representation, dim: int, value: float) -> Representation:
    """Set one mean coordinate, leaving everything else untouched."""
    if not 0 <= dim < r.dim:
        raise ValueError(f"dimension {dim} outside [0, {r.dim})")
    mu = r.mu.copy()
    mu[dim] = value
    return Representation(mu, r.sigma.copy())


def average_representation(rs: list[Representation]) -> Representation:
    if not rs:
        raise ValueError("cannot average an empty list")
    for r in rs[1:]:
        _require_same_dim(rs[0], r)
    return Representation(np.mean([r.mu for r in rs], axis=0),
                          np.mean([r.sigma for r in rs], axis=0))


def pairwise_w2_matrix(rs: list[Representation]) -> np.ndarray:
    """Symmetric matrix of (non-squared) W2 distances, zero diagonal."""
    if len(rs) < 2:
        raise ValueError("need at least two representations")
    mus = np.stack([r.mu for r in rs])
    sigmas = np.stack([r.sigma for r in rs])
    sq = _pairwise_sq(mus) + _pairwise_sq(sigmas)
    sq = 0.5 * (sq + sq.T)  # GEMM output is not bit-symmetric
    np.fill_diagonal(sq, 0.0)
    return np.sqrt(np.clip(sq, 0.0, None))


def _pairwise_sq(v: np.ndarray) -> np.ndarray:
    norms = np.sum(v * v, axis=1)
    return norms[:, None] + norms[None, :] - 2.0 * (v @ v.T)


def split_by_layer(vector: np.ndarray, layer_sizes) -> list[np.ndarray]:
    sizes = list(layer_sizes)
    if vector.shape[0] != sum(sizes):
        raise ValueError(f"vector of length {vector.shape[0]} does not split into {sizes}")
    return np.split(vector, np.cumsum(sizes)[:-1])


def reconstruct(model, r: Representation, dt: float = 0.0) -> Pgpm:
    """Decode the representation's mean; no sampling, deterministic."""
    sizes = model.config.latent_layer_sizes
    if r.dim != sum(sizes):
        raise ValueError(f"representation dim {r.dim} does not match model latent dim {sum(sizes)}")
    zs = [Tensor(part[None, :]) for part in split_by_layer(r.mu, sizes)]
    img = model.snapshot().decode(zs)
    return Pgpm(img.data[0, 0], dt, f"recon:{r.source_id or 'working'}")
