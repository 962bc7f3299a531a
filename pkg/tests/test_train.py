"""Schedule, optimizer, training-loop and checkpoint tests."""

import numpy as np
import pytest

from gridinsight import data, hvae, train
from gridinsight.errors import DecodeError


def paper_scale_config():
    return train.TrainConfig(epochs=1200, lr_phase1_epochs=800, lr_phase2_epochs=200,
                             decay_every_phase2=10, warmup_epochs=300, base_lr=0.005)


def small_train_config(**kw):
    defaults = dict(epochs=2, batch_size=8, base_lr=0.01, momentum=0.9,
                    lr_phase1_epochs=1, lr_phase2_epochs=1, decay_every_phase2=1,
                    warmup_epochs=1, seed=0, eval_every=1, eval_fraction=0.25,
                    eval_mc_samples=1)
    defaults.update(kw)
    return train.TrainConfig(**defaults)


def tiny_dataset(n=16, seed=0):
    spec = data.SyntheticSpec(
        m=4, t=4, seed=seed,
        insights=(
            data.InsightSpec("a", "step_sag", (0, 1), (1, 2), (0, 1), (2, 3), (0.2, 0.3)),
            data.InsightSpec("b", "step_surge", (2, 3), (1, 2), (0, 1), (2, 3), (0.2, 0.3)),
        ))
    return data.generate_synthetic(spec, n)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def test_lr_schedule_paper_scale_values():
    cfg = paper_scale_config()
    assert train.lr_at_epoch(cfg, 0) == 0.005
    assert train.lr_at_epoch(cfg, 799) == 0.005
    assert train.lr_at_epoch(cfg, 810) == pytest.approx(0.005 * 0.9)
    # phase 3 decays every epoch, continuing from where phase 2 left off
    assert train.lr_at_epoch(cfg, 1000) == pytest.approx(0.005 * 0.9**20)
    assert train.lr_at_epoch(cfg, 1001) == pytest.approx(0.005 * 0.9**21)


def test_lr_schedule_constant_when_decay_one():
    cfg = train.TrainConfig(epochs=50, lr_decay=1.0, lr_phase1_epochs=10,
                            lr_phase2_epochs=10, warmup_epochs=0)
    assert all(train.lr_at_epoch(cfg, e) == cfg.base_lr for e in range(50))


def test_lr_schedule_monotone_non_increasing():
    cfg = train.TrainConfig(epochs=120, lr_phase1_epochs=80, lr_phase2_epochs=20,
                            decay_every_phase2=2, warmup_epochs=30)
    values = [train.lr_at_epoch(cfg, e) for e in range(cfg.epochs)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_lr_schedule_range_check():
    cfg = small_train_config()
    with pytest.raises(ValueError):
        train.lr_at_epoch(cfg, -1)
    with pytest.raises(ValueError):
        train.lr_at_epoch(cfg, cfg.epochs)


def test_beta_schedule():
    cfg = paper_scale_config()
    assert train.beta_at_epoch(cfg, 0) == pytest.approx(1 / 300)
    assert train.beta_at_epoch(cfg, 299) == 1.0
    assert train.beta_at_epoch(cfg, 1100) == 1.0
    none = train.TrainConfig(epochs=10, warmup_epochs=0)
    assert all(train.beta_at_epoch(none, e) == 1.0 for e in range(10))
    values = [train.beta_at_epoch(cfg, e) for e in range(cfg.epochs)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        train.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        train.TrainConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        train.TrainConfig(epochs=5, warmup_epochs=6)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_sgd_plain_step():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -0.5])}
    v = {"w": np.zeros(2)}
    new_p, new_v = train.sgd_momentum_step(p, g, v, lr=1.0, momentum=0.0)
    np.testing.assert_allclose(new_p["w"], [0.5, 2.5])
    np.testing.assert_allclose(new_v["w"], g["w"])


def test_sgd_zero_grad_zero_velocity_no_change():
    p = {"w": np.array([3.0])}
    new_p, _ = train.sgd_momentum_step(p, {"w": np.zeros(1)}, {"w": np.zeros(1)}, 0.1, 0.9)
    np.testing.assert_array_equal(new_p["w"], p["w"])


def test_sgd_two_steps_momentum_displacement():
    g = np.array([1.0])
    p = {"w": np.array([0.0])}
    v = {"w": np.zeros(1)}
    p1, v1 = train.sgd_momentum_step(p, {"w": g}, v, lr=1.0, momentum=0.9)
    p2, _ = train.sgd_momentum_step(p1, {"w": g}, v1, lr=1.0, momentum=0.9)
    np.testing.assert_allclose(p2["w"], -(1.0 + 1.9))


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        train.sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)},
                                {"w": np.zeros(2)}, 0.1, 0.0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_lr_leaves_parameters_unchanged():
    ds = tiny_dataset()
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    train.train(model, ds, small_train_config(epochs=1, base_lr=0.0))
    for name, arr in before.items():
        np.testing.assert_array_equal(model.params[name].data, arr)


def test_training_deterministic_under_seed():
    ds = tiny_dataset()
    runs = []
    for _ in range(2):
        model = hvae.ConvHVAE(hvae.tiny_config(), seed=3)
        hist = train.train(model, ds, small_train_config(epochs=2))
        runs.append((hist.to_csv(), {k: v.data.copy() for k, v in model.params.items()}))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][name], runs[1][1][name])


def test_first_step_descends_on_batch_loss():
    ds = tiny_dataset(n=8)
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=1)
    grids = ds.grids
    before = train.evaluate_elbo(model, grids, 1, seed=5)
    cfg = small_train_config(epochs=1, batch_size=8, base_lr=1e-3, momentum=0.0,
                             warmup_epochs=0, eval_fraction=0.0)
    train.train(model, ds, cfg, eval_dataset=grids)
    after = train.evaluate_elbo(model, grids, 1, seed=5)
    assert after > before


def test_history_shapes_and_csv_roundtrip():
    ds = tiny_dataset()
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=2)
    cfg = small_train_config(epochs=3, eval_every=2)
    hist = train.train(model, ds, cfg)
    assert len(hist.records) == 3
    assert hist.records[0].eval_elbo is None  # eval_every = 2
    assert hist.records[1].eval_elbo is not None
    assert hist.records[2].eval_elbo is not None  # final epoch always evaluated
    parsed = train.TrainHistory.from_csv(hist.to_csv())
    assert parsed.to_csv() == hist.to_csv()


def test_train_rejects_conflicting_obs_variance():
    ds = tiny_dataset()
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=0)
    with pytest.raises(ValueError):
        train.train(model, ds, small_train_config(obs_variance=0.5))


def test_train_emits_checkpoints(tmp_path):
    ds = tiny_dataset()
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=0)
    train.train(model, ds, small_train_config(epochs=2, eval_every=1),
                checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt-0000.bin", "ckpt-0001.bin"]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("model_cls", [hvae.ConvHVAE, hvae.MlpHVAE])
def test_checkpoint_roundtrip_bit_exact(tmp_path, model_cls):
    model = model_cls(hvae.tiny_config(), seed=9)
    path = tmp_path / "m.bin"
    train.save_checkpoint(model, small_train_config(), path)
    loaded = train.load_checkpoint(path)
    assert loaded.kind == model.kind
    assert loaded.config == model.config
    for name, p in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, p.data)
    x = np.random.default_rng(0).uniform(0, 1, (4, 4))
    a = hvae.infer(model, x)
    b = hvae.infer(loaded, x)
    for ma, mb in zip(a.mu, b.mu):
        np.testing.assert_array_equal(ma.data, mb.data)
    za = hvae.generate(model, [np.ones(2) * 0.3, np.ones(2) * -0.2])
    zb = hvae.generate(loaded, [np.ones(2) * 0.3, np.ones(2) * -0.2])
    np.testing.assert_array_equal(za.data, zb.data)


def test_checkpoint_truncation_is_decode_error(tmp_path):
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=0)
    path = tmp_path / "m.bin"
    train.save_checkpoint(model, None, path)
    blob = path.read_bytes()
    for cut in (4, 40, len(blob) // 2, len(blob) - 3):
        path.write_bytes(blob[:cut])
        with pytest.raises(DecodeError):
            train.load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(tmp_path):
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=0)
    path = tmp_path / "m.bin"
    train.save_checkpoint(model, None, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(DecodeError):
        train.load_checkpoint(path)
    blob = bytearray(train.CHECKPOINT_MAGIC + b"\xff\xff\xff\xff")
    path.write_bytes(bytes(blob))
    with pytest.raises(DecodeError):
        train.load_checkpoint(path)


def test_checkpoint_reproduces_eval_elbo(tmp_path):
    ds = tiny_dataset()
    model = hvae.ConvHVAE(hvae.tiny_config(), seed=4)
    cfg = small_train_config(epochs=2, eval_every=2)
    hist = train.train(model, ds, cfg, checkpoint_dir=tmp_path)
    recorded = hist.records[-1].eval_elbo
    loaded = train.load_checkpoint(tmp_path / "ckpt-0001.bin")
    _, eval_grids = train.split_train_eval(ds.grids, cfg)
    again = train.evaluate_elbo(loaded, eval_grids, cfg.eval_mc_samples, seed=cfg.seed + 1)
    assert abs(again - recorded) <= 1e-9
