"""Hierarchical Gaussian-latent VAEs over grid pixel maps.

Two interchangeable architectures share one config and one ELBO:

* :class:`ConvHVAE` — dense-block convolutional encoder (every conv layer
  consumes the concatenation of all previous outputs, DenseNet style, with
  stride-2 transition convs) and a U-Net-like expanding decoder that
  upsamples from the deepest grid back to full resolution, injecting each
  latent layer as a learned feature map at its matching resolution.
* :class:`MlpHVAE` — fully connected encoder/decoder with the same latent
  hierarchy, no convolutions and no per-resolution injection; the reference
  baseline.

The inference net produces per-layer diagonal Gaussians q(z_l|x) =
N(mu_l, diag sigma_l^2); the prior is standard normal per layer; the
observation model is N(decode(z), obs_variance * I) over pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class DenseBlockSpec:
    """One encoder stage: a dense block followed by a strided transition conv."""

    layers: int = 4
    growth: int = 8
    transition_channels: int = 14
    downsample: int = 2


@dataclass(frozen=True)
class HvaeConfig:
    image_height: int = 32
    image_width: int = 32
    latent_layer_sizes: tuple[int, ...] = (8, 8)
    stem_channels: int = 8
    stem_stride: int = 2
    encoder_blocks: tuple[DenseBlockSpec, ...] = (
        DenseBlockSpec(transition_channels=12), DenseBlockSpec(transition_channels=14))
    decoder_seed_channels: int = 14
    decoder_inject_channels: int = 6
    decoder_stage_channels: tuple[int, ...] = (14, 10, 8)
    mlp_hidden_sizes: tuple[int, ...] = (256, 256)
    obs_variance: float = 0.1
    mc_samples: int = 64

    def __post_init__(self):
        if len(self.latent_layer_sizes) < 1:
            raise ValueError("need at least one latent layer")
        if len(self.encoder_blocks) != len(self.latent_layer_sizes):
            raise ValueError("one encoder block per latent layer")
        if self.obs_variance <= 0:
            raise ValueError("obs_variance must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if len(self.mlp_hidden_sizes) != len(self.latent_layer_sizes):
            raise ValueError("one MLP hidden size per latent layer")
        factors = self.downsample_factors()
        total = int(np.prod(factors))
        if self.image_height % total or self.image_width % total:
            raise ValueError(
                f"image size {self.image_height}x{self.image_width} must be divisible "
                f"by the cumulative downsample factor {total}")
        if len(self.decoder_stage_channels) != len(factors):
            raise ValueError("decoder_stage_channels must have one entry per downsample")

    def downsample_factors(self) -> list[int]:
        factors = [self.stem_stride] if self.stem_stride > 1 else []
        factors.extend(b.downsample for b in self.encoder_blocks)
        return factors

    @property
    def num_latent_layers(self) -> int:
        return len(self.latent_layer_sizes)

    @property
    def latent_dim(self) -> int:
        return int(sum(self.latent_layer_sizes))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HvaeConfig":
        d = dict(d)
        d["latent_layer_sizes"] = tuple(d["latent_layer_sizes"])
        d["encoder_blocks"] = tuple(DenseBlockSpec(**b) for b in d["encoder_blocks"])
        d["decoder_stage_channels"] = tuple(d["decoder_stage_channels"])
        d["mlp_hidden_sizes"] = tuple(d["mlp_hidden_sizes"])
        return cls(**d)


def tiny_config() -> HvaeConfig:
    """4x4 images, latent sizes [2,2]: small enough for finite differences."""
    return HvaeConfig(
        image_height=4, image_width=4, latent_layer_sizes=(2, 2),
        stem_channels=3, stem_stride=1,
        encoder_blocks=(DenseBlockSpec(layers=1, growth=3, transition_channels=4),
                        DenseBlockSpec(layers=1, growth=3, transition_channels=4)),
        decoder_seed_channels=4, decoder_inject_channels=3,
        decoder_stage_channels=(4, 3), mlp_hidden_sizes=(8, 8))


@dataclass
class GaussianLatent:
    """Per-layer posterior parameters for a batch of inputs.

    ``mu[l]`` and ``logvar[l]`` are [N, k_l] tensors; standard deviations are
    derived as exp(logvar/2) so they are strictly positive by construction.
    """

    mu: list[Tensor]
    logvar: list[Tensor]

    def sigma(self) -> list[Tensor]:
        return [ad.exp(ad.mul_scalar(lv, 0.5)) for lv in self.logvar]

    @property
    def batch_size(self) -> int:
        return self.mu[0].shape[0]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.mu)

    def mu_vector(self, i: int = 0) -> np.ndarray:
        return np.concatenate([m.data[i] for m in self.mu])

    def sigma_vector(self, i: int = 0) -> np.ndarray:
        return np.concatenate([np.exp(0.5 * lv.data[i]) for lv in self.logvar])


# fresh posteriors start tight (sigma = e^-1.5 ~ 0.22): with unit-width
# posteriors the decoder sees pure noise at z and learns to ignore it, after
# which the KL pull finishes the collapse; a tight start keeps z informative
LOGVAR_BIAS_INIT = -3.0


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _ParamStore:
    """Ordered parameter dictionary with seeded fan-in-uniform initialization."""

    def __init__(self, rng: np.random.Generator | None, existing: dict[str, Tensor] | None):
        self.rng = rng
        self.existing = existing
        self.params: dict[str, Tensor] = {}

    def conv(self, name: str, f: int, c: int, kh: int = 3, kw: int = 3) -> tuple[Tensor, Tensor]:
        w = self._take(f"{name}.w", (f, c, kh, kw), fan_in=c * kh * kw)
        b = self._take(f"{name}.b", (f,), fan_in=0)
        return w, b

    def affine(self, name: str, d: int, e: int, bias_fill: float = 0.0) -> tuple[Tensor, Tensor]:
        w = self._take(f"{name}.w", (d, e), fan_in=d)
        b = self._take(f"{name}.b", (e,), fan_in=0, fill=bias_fill)
        return w, b

    def _take(self, name: str, shape: tuple[int, ...], fan_in: int,
              fill: float = 0.0) -> Tensor:
        if self.existing is not None:
            t = self.existing[name]
            if t.data.shape != shape:
                raise ValueError(f"parameter {name}: expected shape {shape}, got {t.data.shape}")
        else:
            data = np.full(shape, fill) if fan_in == 0 else _uniform_init(self.rng, shape, fan_in)
            t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t


class ConvHVAE:
    """Dense-block encoder, hierarchical latents, upsampling decoder."""

    kind = "conv"

    def __init__(self, config: HvaeConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        rng = None if params is not None else np.random.default_rng(seed)
        store = _ParamStore(rng, params)
        cfg = config

        # encoder wiring; latent layer l reads the feature map after block l's transition
        self._stem = store.conv("enc.stem", cfg.stem_channels, 1)
        h_res, w_res = cfg.image_height, cfg.image_width
        if cfg.stem_stride > 1:
            h_res, w_res = h_res // cfg.stem_stride, w_res // cfg.stem_stride
        self._blocks = []
        self._latent_res: list[tuple[int, int]] = []
        channels = cfg.stem_channels
        for bi, block in enumerate(cfg.encoder_blocks):
            convs = []
            for li in range(block.layers):
                convs.append(store.conv(f"enc.block{bi}.conv{li}", block.growth, channels))
                channels += block.growth
            trans = store.conv(f"enc.trans{bi}", block.transition_channels, channels)
            channels = block.transition_channels
            h_res, w_res = h_res // block.downsample, w_res // block.downsample
            self._latent_res.append((h_res, w_res))
            self._blocks.append((block, convs, trans))
        self._heads = []
        for l, k in enumerate(cfg.latent_layer_sizes):
            c = cfg.encoder_blocks[l].transition_channels
            flat = c * self._latent_res[l][0] * self._latent_res[l][1]
            self._heads.append((store.affine(f"head.mu{l}", flat, k),
                                store.affine(f"head.logvar{l}", flat, k,
                                             bias_fill=LOGVAR_BIAS_INIT)))

        # decoder plan: seed at the deepest grid, upsample through the encoder's
        # downsample factors in reverse, injecting z_l where its resolution matches
        factors = cfg.downsample_factors()
        deep_h, deep_w = self._latent_res[-1]
        self._seed_res = (deep_h, deep_w)
        self._seed = store.affine(
            "dec.seed", cfg.latent_layer_sizes[-1], cfg.decoder_seed_channels * deep_h * deep_w)
        res_of_latent = {self._latent_res[l]: l for l in range(cfg.num_latent_layers - 1)}
        self._stages = []
        channels = cfg.decoder_seed_channels
        cur_h, cur_w = deep_h, deep_w
        for si, factor in enumerate(reversed(factors)):
            cur_h, cur_w = cur_h * factor, cur_w * factor
            inject = res_of_latent.get((cur_h, cur_w))
            inject_params = None
            in_channels = channels
            if inject is not None:
                inject_params = store.affine(
                    f"dec.inject{inject}", cfg.latent_layer_sizes[inject],
                    cfg.decoder_inject_channels * cur_h * cur_w)
                in_channels += cfg.decoder_inject_channels
            out_channels = cfg.decoder_stage_channels[si]
            conv = store.conv(f"dec.stage{si}", out_channels, in_channels)
            self._stages.append((factor, inject, inject_params, (cur_h, cur_w), conv))
            channels = out_channels
        # 1x1 head: the last 3x3 stage already mixes spatially at full resolution
        self._out = store.conv("dec.out", 1, channels, kh=1, kw=1)
        self.params = store.params

    def encode(self, x: Tensor) -> GaussianLatent:
        cfg = self.config
        sw, sb = self._stem
        h = ad.relu(ad.add_channel_bias(
            ad.conv2d(x, sw, stride=cfg.stem_stride, padding=1), sb))
        mus, logvars = [], []
        for (block, convs, trans), ((hw_mu, hb_mu), (hw_lv, hb_lv)) in zip(self._blocks, self._heads):
            for w, b in convs:
                y = ad.relu(ad.add_channel_bias(ad.conv2d(h, w, padding=1), b))
                h = ad.concat_channels(h, y)
            tw, tb = trans
            h = ad.relu(ad.add_channel_bias(
                ad.conv2d(h, tw, stride=block.downsample, padding=1), tb))
            flat = ad.reshape(h, (h.shape[0], h.shape[1] * h.shape[2] * h.shape[3]))
            mus.append(ad.dense_affine(flat, hw_mu, hb_mu))
            logvars.append(ad.dense_affine(flat, hw_lv, hb_lv))
        return GaussianLatent(mus, logvars)

    def decode(self, zs: Sequence[Tensor]) -> Tensor:
        cfg = self.config
        _check_latents(zs, cfg)
        n = zs[0].shape[0]
        w, b = self._seed
        h = ad.relu(ad.dense_affine(zs[-1], w, b))
        h = ad.reshape(h, (n, cfg.decoder_seed_channels, *self._seed_res))
        for factor, inject, inject_params, (rh, rw), (cw, cb) in self._stages:
            h = ad.upsample_nearest(h, factor)
            if inject is not None:
                iw, ib = inject_params
                m = ad.relu(ad.dense_affine(zs[inject], iw, ib))
                m = ad.reshape(m, (n, cfg.decoder_inject_channels, rh, rw))
                h = ad.concat_channels(h, m)
            h = ad.relu(ad.add_channel_bias(ad.conv2d(h, cw, padding=1), cb))
        ow, ob = self._out
        return ad.sigmoid(ad.add_channel_bias(ad.conv2d(h, ow), ob))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def snapshot(self) -> "ConvHVAE":
        frozen = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return ConvHVAE(self.config, params=frozen)


class MlpHVAE:
    """Fully connected hierarchical VAE with the same latent contracts."""

    kind = "mlp"

    def __init__(self, config: HvaeConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        rng = None if params is not None else np.random.default_rng(seed)
        store = _ParamStore(rng, params)
        cfg = config
        d_img = cfg.image_height * cfg.image_width
        hidden = cfg.mlp_hidden_sizes

        self._enc_layers = []
        self._heads = []
        d = d_img
        for l, k in enumerate(cfg.latent_layer_sizes):
            self._enc_layers.append(store.affine(f"enc.fc{l}", d, hidden[l]))
            d = hidden[l]
            self._heads.append((store.affine(f"head.mu{l}", d, k),
                                store.affine(f"head.logvar{l}", d, k,
                                             bias_fill=LOGVAR_BIAS_INIT)))

        # deepest latent seeds the stack, shallower ones join one stage later each
        rev = tuple(reversed(hidden))
        self._dec_layers = []
        d = cfg.latent_layer_sizes[-1]
        for si in range(len(rev)):
            latent = cfg.num_latent_layers - 1 - si
            inject = latent if si >= 1 and latent >= 0 else None
            if inject is not None:
                d += cfg.latent_layer_sizes[inject]
            self._dec_layers.append((inject, store.affine(f"dec.fc{si}", d, rev[si])))
            d = rev[si]
        self._out = store.affine("dec.out", d, d_img)
        self.params = store.params

    def encode(self, x: Tensor) -> GaussianLatent:
        n = x.shape[0]
        h = ad.reshape(x, (n, self.config.image_height * self.config.image_width))
        mus, logvars = [], []
        for (w, b), ((hw_mu, hb_mu), (hw_lv, hb_lv)) in zip(self._enc_layers, self._heads):
            h = ad.relu(ad.dense_affine(h, w, b))
            mus.append(ad.dense_affine(h, hw_mu, hb_mu))
            logvars.append(ad.dense_affine(h, hw_lv, hb_lv))
        return GaussianLatent(mus, logvars)

    def decode(self, zs: Sequence[Tensor]) -> Tensor:
        cfg = self.config
        _check_latents(zs, cfg)
        n = zs[0].shape[0]
        h = zs[-1]
        for inject, (w, b) in self._dec_layers:
            if inject is not None:
                h = ad.concat_channels(h, zs[inject])
            h = ad.relu(ad.dense_affine(h, w, b))
        ow, ob = self._out
        out = ad.sigmoid(ad.dense_affine(h, ow, ob))
        return ad.reshape(out, (n, 1, cfg.image_height, cfg.image_width))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def snapshot(self) -> "MlpHVAE":
        frozen = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return MlpHVAE(self.config, params=frozen)


def build_mlp_hvae(config: HvaeConfig, seed: int = 0) -> MlpHVAE:
    """Baseline with identical infer/generate/elbo contracts, MLP throughout."""
    return MlpHVAE(config, seed=seed)


MODEL_KINDS = {"conv": ConvHVAE, "mlp": MlpHVAE}


def _check_latents(zs: Sequence[Tensor], cfg: HvaeConfig) -> None:
    if len(zs) != cfg.num_latent_layers:
        raise ValueError(f"expected {cfg.num_latent_layers} latent layers, got {len(zs)}")
    for z, k in zip(zs, cfg.latent_layer_sizes):
        if z.data.ndim != 2 or z.shape[1] != k:
            raise ValueError(f"latent layer shape {z.shape} incompatible with size {k}")


def _as_batch_tensor(x, cfg: HvaeConfig) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != (cfg.image_height, cfg.image_width):
        raise ValueError(
            f"input shape {arr.shape} does not match configured "
            f"{cfg.image_height}x{cfg.image_width} image")
    return x if isinstance(x, Tensor) and x.data.ndim == 4 else Tensor(arr)


def infer(model, x) -> GaussianLatent:
    """Posterior parameters for one pixel map (HxW array) or a batch [N,1,H,W]."""
    return model.encode(_as_batch_tensor(x, model.config))


def reparameterize(g: GaussianLatent, seed: int) -> list[Tensor]:
    """z_l = mu_l + sigma_l * eps with eps ~ N(0, I) from a seeded generator."""
    return reparameterize_rng(g, np.random.default_rng(seed))


def reparameterize_rng(g: GaussianLatent, rng: np.random.Generator) -> list[Tensor]:
    zs = []
    for mu, sigma in zip(g.mu, g.sigma()):
        eps = Tensor(rng.standard_normal(mu.shape))
        zs.append(mu + sigma * eps)
    return zs


def generate(model, zs) -> Tensor:
    """Decode latent vectors into an image batch with pixels in (0, 1)."""
    tensors = [z if isinstance(z, Tensor) else Tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
               for z in zs]
    return model.decode(tensors)


def kl_term(g: GaussianLatent) -> Tensor:
    """KL(q(z|x) || N(0, I)), closed form, summed over layers and dimensions.

    Per dimension: (mu^2 + sigma^2 - log sigma^2 - 1) / 2. For a batch the
    result is averaged over samples so it stays comparable across batch sizes.
    """
    n = g.batch_size
    total = None
    for mu, lv in zip(g.mu, g.logvar):
        per_dim = ad.add_scalar(ad.square(mu) + ad.exp(lv) - lv, -1.0)
        layer = ad.mul_scalar(ad.tsum(per_dim), 0.5)
        total = layer if total is None else total + layer
    return ad.mul_scalar(total, 1.0 / n)


def elbo_terms(model, x: Tensor, k_samples: int, beta: float,
               rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable ELBO estimate for a batch (graph-building path).

    elbo = mean_k [ -||x - decode(z^k)||^2 / (2 sigma^2) - (D/2) log(2 pi sigma^2) ]
           - beta * KL,  averaged per sample.
    """
    if k_samples < 1:
        raise ValueError("k_samples must be >= 1")
    cfg = model.config
    n = x.shape[0]
    d = cfg.image_height * cfg.image_width
    g = model.encode(x)
    sse_sum = None
    for _ in range(k_samples):
        zs = reparameterize_rng(g, rng)
        xhat = model.decode(zs)
        sse = ad.tsum(ad.square(x - xhat))
        sse_sum = sse if sse_sum is None else sse_sum + sse
    log_norm = 0.5 * d * math.log(2.0 * math.pi * cfg.obs_variance)
    recon = ad.add_scalar(
        ad.mul_scalar(sse_sum, -1.0 / (2.0 * cfg.obs_variance * k_samples * n)), -log_norm)
    kl = kl_term(g)
    elbo_t = recon - ad.mul_scalar(kl, beta)
    return elbo_t, recon, kl


def elbo(model, x, k_samples: int = 1, beta: float = 1.0,
         seed: int = 0) -> tuple[float, float, float]:
    """(elbo, reconstruction_term, kl) as floats; beta=1 gives a valid lower
    bound on the log evidence. Runs on a parameter snapshot, building no graph."""
    frozen = model.snapshot()
    xt = _as_batch_tensor(x, model.config)
    e, r, k = elbo_terms(frozen, xt, k_samples, beta, np.random.default_rng(seed))
    return e.item(), r.item(), k.item()


def reconstruction_mse(model, grids: np.ndarray, batch_size: int = 64) -> float:
    """Mean squared pixel error of posterior-mean reconstructions over [n,H,W] grids."""
    frozen = model.snapshot()
    total, count = 0.0, 0
    for start in range(0, grids.shape[0], batch_size):
        batch = Tensor(grids[start:start + batch_size, None, :, :])
        g = frozen.encode(batch)
        xhat = frozen.decode(g.mu)
        total += float(np.sum((batch.data - xhat.data) ** 2))
        count += batch.data.size
    return total / count
