"""SGD-with-momentum training for the hierarchical VAEs.

Learning rate follows a three-phase schedule (constant, periodic decay,
per-epoch decay) and the KL weight is annealed linearly from 1/warmup to 1
over the first ``warmup_epochs`` epochs. Checkpoints are a self-describing
binary: magic, format version, a length-prefixed UTF-8 JSON metadata
document, then a named tensor table of little-endian float64 payloads.
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hvae
from .autodiff import Tensor, backward
from .errors import DecodeError, NonFiniteError, TrainingDiverged

CHECKPOINT_MAGIC = b"GINSCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    base_lr: float = 0.005
    momentum: float = 0.9
    lr_phase1_epochs: int = 80
    lr_phase2_epochs: int = 20
    lr_decay: float = 0.9
    decay_every_phase2: int = 2
    warmup_epochs: int = 30
    seed: int = 0
    obs_variance: float | None = None  # None: defer to the model config
    eval_every: int = 10
    eval_fraction: float = 0.2
    eval_mc_samples: int = 8
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        if self.decay_every_phase2 < 1:
            raise ValueError("decay_every_phase2 must be >= 1")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise schedule: constant, then x decay every ``decay_every_phase2``
    epochs, then x decay every epoch once phase 2 is over."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    p1, p2 = cfg.lr_phase1_epochs, cfg.lr_phase2_epochs
    if epoch < p1:
        steps = 0
    elif epoch < p1 + p2:
        steps = (epoch - p1) // cfg.decay_every_phase2
    else:
        steps = p2 // cfg.decay_every_phase2 + (epoch - p1 - p2)
    return cfg.base_lr * cfg.lr_decay**steps


def beta_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Linear KL warm-up; 1 from the end of warm-up onward."""
    if cfg.warmup_epochs <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / cfg.warmup_epochs)


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float,
                      momentum: float) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """v <- momentum*v + grad; p <- p - lr*v. Returns fresh arrays."""
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"{name}: shape mismatch in sgd step")
        v = momentum * v + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    beta: float
    train_elbo: float
    eval_elbo: float | None = None
    eval_mse: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    train_seconds: float = 0.0

    def eval_series(self) -> list[tuple[int, float]]:
        return [(r.epoch, r.eval_elbo) for r in self.records if r.eval_elbo is not None]

    def to_csv(self) -> str:
        lines = ["epoch,lr,beta,train_elbo,eval_elbo,mse"]
        for r in self.records:
            ev = "" if r.eval_elbo is None else repr(r.eval_elbo)
            ms = "" if r.eval_mse is None else repr(r.eval_mse)
            lines.append(f"{r.epoch},{r.lr!r},{r.beta!r},{r.train_elbo!r},{ev},{ms}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        records = []
        for line in text.strip().splitlines()[1:]:
            epoch, lr, beta, tr, ev, ms = line.split(",")
            records.append(EpochRecord(int(epoch), float(lr), float(beta), float(tr),
                                       float(ev) if ev else None, float(ms) if ms else None))
        return cls(records)


def _grids_of(dataset) -> np.ndarray:
    grids = dataset.grids if hasattr(dataset, "grids") else np.asarray(dataset)
    if grids.ndim != 3:
        raise ValueError("expected grids of shape [n, H, W]")
    return grids


def train(model, dataset, cfg: TrainConfig, eval_dataset=None,
          checkpoint_dir: str | Path | None = None) -> TrainHistory:
    """Maximize the warm-up-weighted ELBO over the dataset.

    Shuffles per epoch with a generator seeded from ``cfg.seed``; when no
    eval set is supplied, holds out ``eval_fraction`` of the samples. Emits a
    checkpoint at every evaluation point when ``checkpoint_dir`` is given.
    Aborts with :class:`TrainingDiverged` naming the epoch/batch if the loss
    goes non-finite.
    """
    grids = _grids_of(dataset)
    if grids.shape[0] == 0:
        raise ValueError("dataset is empty")
    if cfg.obs_variance is not None and cfg.obs_variance != model.config.obs_variance:
        raise ValueError(
            f"train config obs_variance {cfg.obs_variance} conflicts with "
            f"model obs_variance {model.config.obs_variance}")
    rng = np.random.default_rng(cfg.seed)
    if eval_dataset is not None:
        train_grids, eval_grids = grids, _grids_of(eval_dataset)
    else:
        train_grids, eval_grids = split_train_eval(grids, cfg)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    history = TrainHistory()
    n = train_grids.shape[0]
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        beta = beta_at_epoch(cfg, epoch)
        order = rng.permutation(n)
        batch_elbos = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(train_grids[idx][:, None, :, :])
            try:
                elbo_t, _, _ = hvae.elbo_terms(model, x, 1, beta, rng)
                loss = elbo_t * -1.0
                backward(loss)
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {err}") from err
            batch_elbos.append(elbo_t.item())
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in model.params.items()}
            if cfg.grad_clip is not None:
                norm = float(np.sqrt(sum(float(np.sum(g**2)) for g in grads.values())))
                if norm > cfg.grad_clip:
                    scale = cfg.grad_clip / norm
                    grads = {name: g * scale for name, g in grads.items()}
            new_params, velocity = sgd_momentum_step(
                {k: p.data for k, p in model.params.items()}, grads, velocity,
                lr, cfg.momentum)
            for name, p in model.params.items():
                p.data = new_params[name]
                p.zero_grad()

        record = EpochRecord(epoch, lr, beta, float(np.mean(batch_elbos)))
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            record.eval_elbo = evaluate_elbo(model, eval_grids, cfg.eval_mc_samples,
                                             seed=cfg.seed + 1)
            record.eval_mse = hvae.reconstruction_mse(model, eval_grids)
            if checkpoint_dir is not None:
                save_checkpoint(model, cfg, checkpoint_dir / f"ckpt-{epoch:04d}.bin")
        history.records.append(record)
    history.train_seconds = time.perf_counter() - started
    return history


def split_train_eval(grids: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic held-out split used by training and by eval tooling."""
    n = grids.shape[0]
    n_eval = int(round(n * cfg.eval_fraction))
    perm = np.random.default_rng(cfg.seed + 7919).permutation(n)
    if n_eval == 0:
        return grids[perm], grids[perm[:0]]
    return grids[perm[n_eval:]], grids[perm[:n_eval]]


def evaluate_elbo(model, grids: np.ndarray, k_samples: int, seed: int,
                  batch_size: int = 64) -> float:
    """Mean per-sample ELBO (beta = 1) over a grid stack, no graph built."""
    if grids.shape[0] == 0:
        return float("nan")
    frozen = model.snapshot()
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for start in range(0, grids.shape[0], batch_size):
        batch = grids[start:start + batch_size]
        e, _, _ = hvae.elbo_terms(frozen, Tensor(batch[:, None]), k_samples, 1.0, rng)
        total += e.item() * batch.shape[0]
        count += batch.shape[0]
    return total / count


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(model, cfg: TrainConfig | None, path: str | Path) -> None:
    meta = {
        "kind": model.kind,
        "model_config": model.config.to_dict(),
        "train_config": None if cfg is None else cfg.to_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name].data
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read_exact(fh, count: int) -> bytes:
    chunk = fh.read(count)
    if len(chunk) != count:
        raise DecodeError(f"truncated checkpoint: wanted {count} bytes, got {len(chunk)}")
    return chunk


def load_checkpoint(path: str | Path):
    """Rebuild the model (bit-identical parameters). The train config used to
    produce the checkpoint, if any, is attached as ``model.train_config``."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise DecodeError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise DecodeError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise DecodeError(f"corrupt checkpoint metadata: {err}") from err
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        params: dict[str, Tensor] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * size)
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params[name] = Tensor(arr, requires_grad=True)
        if fh.read(1):
            raise DecodeError("trailing bytes after tensor table")
    kind = meta.get("kind")
    if kind not in hvae.MODEL_KINDS:
        raise DecodeError(f"unknown model kind {kind!r}")
    config = hvae.HvaeConfig.from_dict(meta["model_config"])
    try:
        model = hvae.MODEL_KINDS[kind](config, params=params)
    except (KeyError, ValueError) as err:
        raise DecodeError(f"checkpoint parameter table incomplete: {err}") from err
    model.train_config = (None if meta.get("train_config") is None
                          else TrainConfig.from_dict(meta["train_config"]))
    return model
