import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xspec import autodiff as ad
from xspec import trainer
from xspec.config import load_config
from xspec.data import SieScheme, SynthConfig, sample_batch, synth_generate
from xspec.errors import ContractError, NumericalError, ParameterError
from xspec.losses import LossConfig
from xspec.model import ModelConfig, init_params
from xspec.trainer import TrainConfig, augment, batch_loss, hflip, lr_at, pad_crop, sgd_step, train

TINY_MODEL = dict(image_h=16, image_w=8, patch=4, dim=8, heads=2, layers=1, k_local=2, n_sie=2, n_classes=4)
TINY_DATA = SynthConfig(image_h=16, image_w=8, cell=4)
FULL_SCALE = TrainConfig()


def tiny_run(**train_kw):
    ds = synth_generate(4, 2, 3, seed=0, config=TINY_DATA)
    cfg = TrainConfig(**{"total_epochs": 2, "warmup_epochs": 1, "lr_init": 0.01, "P": 4, "K_batch": 2, **train_kw})
    return ds, cfg


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_end_of_warmup_is_lr_init():
    assert lr_at(19, FULL_SCALE) == 0.0004


def test_lr_cosine_midpoint():
    assert abs(lr_at(70, FULL_SCALE) - 0.0002) < 1e-18


def test_lr_last_epoch_matches_closed_form():
    # 0.0002 * (1 + cos(pi * 99/100)) evaluated with 30-digit arithmetic
    assert abs(lr_at(119, FULL_SCALE) - 9.86879268536886e-08) < 1e-20


def test_lr_warmup_is_linear():
    assert abs(lr_at(0, FULL_SCALE) - 0.00002) < 1e-20
    assert abs(lr_at(9, FULL_SCALE) - 0.0002) < 1e-20


def test_lr_continuous_at_boundary():
    assert abs(lr_at(20, FULL_SCALE) - lr_at(19, FULL_SCALE)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-5, 1.0), st.integers(0, 30), st.integers(1, 60))
def test_lr_bounded_and_nonincreasing_after_warmup(lr0, warm, extra):
    cfg = TrainConfig(lr_init=lr0, warmup_epochs=warm, total_epochs=warm + extra)
    lrs = [lr_at(e, cfg) for e in range(cfg.total_epochs)]
    assert all(0.0 <= v <= lr0 for v in lrs)
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1:]))


def test_lr_epoch_out_of_range():
    with pytest.raises(ContractError):
        lr_at(120, FULL_SCALE)


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(warmup_epochs=5, total_epochs=4)
    with pytest.raises(ParameterError):
        TrainConfig(lr_init=-1.0)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def test_sgd_matches_hand_update():
    p = {"w": np.array([1.0, -2.0])}
    v = {"w": np.zeros(2)}
    g = np.array([0.5, 0.25])
    sgd_step(p, {"w": g}, v, lr=0.1, momentum=0.9, weight_decay=0.01)
    step1 = g + 0.01 * np.array([1.0, -2.0])
    assert np.allclose(p["w"], np.array([1.0, -2.0]) - 0.1 * step1, rtol=0, atol=1e-15)
    before = p["w"].copy()
    sgd_step(p, {"w": g}, v, lr=0.1, momentum=0.9, weight_decay=0.01)
    step2 = 0.9 * step1 + g + 0.01 * before
    assert np.allclose(p["w"], before - 0.1 * step2, rtol=0, atol=1e-15)


def test_momentum_accumulates_constant_gradient():
    p = {"w": np.zeros(3)}
    v = {"w": np.zeros(3)}
    g = np.array([1.0, 2.0, -1.0])
    for _ in range(2):
        sgd_step(p, {"w": g}, v, lr=0.01, momentum=0.9, weight_decay=0.0)
    assert np.allclose(p["w"], -0.01 * g * 2.9, rtol=0, atol=1e-15)


def test_sgd_rejects_non_finite_gradient():
    p = {"w": np.zeros(2)}
    with pytest.raises(NumericalError, match="w"):
        sgd_step(p, {"w": np.array([np.nan, 0.0])}, {"w": np.zeros(2)}, 0.1, 0.9, 0.0)
    assert np.array_equal(p["w"], np.zeros(2))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def test_flip_is_involution():
    img = np.random.default_rng(0).uniform(size=(6, 4, 3))
    assert np.array_equal(hflip(hflip(img)), img)
    assert np.array_equal(hflip(img)[:, 0], img[:, -1])


def test_augment_disabled_is_identity():
    img = np.random.default_rng(0).uniform(size=(6, 4, 3))
    cfg = TrainConfig(flip=False, pad_crop=False, erase=False)
    assert np.array_equal(augment(img, cfg, np.random.default_rng(1)), img)
    assert np.array_equal(augment(img, cfg, np.random.default_rng(1), force_flip=True), hflip(img))


def test_pad_crop_keeps_shape_and_content():
    img = np.random.default_rng(0).uniform(0.1, 1.0, size=(8, 6, 3))
    out = pad_crop(img, 2, np.random.default_rng(3))
    assert out.shape == img.shape
    inside = out[out.sum(-1) > 0]
    assert all(any(np.array_equal(px, q) for q in img.reshape(-1, 3)) for px in inside[:5])


def test_augment_deterministic_per_rng():
    img = np.random.default_rng(0).uniform(size=(16, 8, 3))
    a = augment(img, FULL_SCALE, np.random.default_rng(5))
    b = augment(img, FULL_SCALE, np.random.default_rng(5))
    assert np.array_equal(a, b) and a.shape == img.shape


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_epochs_returns_init_unchanged():
    ds, _ = tiny_run()
    mc = ModelConfig(**TINY_MODEL)
    res = train(ds, mc, LossConfig(), TrainConfig(total_epochs=0, warmup_epochs=0), SieScheme("domain", 2))
    ref = init_params(mc, 0)
    assert res.log == [] and all(np.array_equal(t.data, ref[n].data) for n, t in res.params)


def test_same_seed_identical_trajectory():
    ds, cfg = tiny_run()
    mc = ModelConfig(**TINY_MODEL)
    a = train(ds, mc, LossConfig(), cfg, SieScheme("domain", 2))
    b = train(ds, mc, LossConfig(), cfg, SieScheme("domain", 2))
    assert len(a.log) >= 3 and a.log == b.log
    assert all(np.array_equal(t.data, b.params[n].data) for n, t in a.params)


def test_different_seed_differs():
    ds, cfg = tiny_run()
    mc = ModelConfig(**TINY_MODEL)
    a = train(ds, mc, LossConfig(), cfg, SieScheme("domain", 2))
    b = train(ds, mc, LossConfig(), TrainConfig(**{**cfg.__dict__, "seed": 1}), SieScheme("domain", 2))
    assert a.log != b.log


def test_epoch_length():
    ds, cfg = tiny_run()
    res = train(ds, ModelConfig(**TINY_MODEL), LossConfig(), cfg, SieScheme("domain", 2))
    assert len(res.log) == 2 * math.ceil(len(ds) / 8)
    assert [e.epoch for e in res.log] == [0, 0, 0, 1, 1, 1]


def test_lambda_zero_never_assigns_sie(monkeypatch):
    def boom(*_):
        raise AssertionError("sie index requested")
    monkeypatch.setattr(trainer, "assign_sie_index", boom)
    ds, cfg = tiny_run()
    train(ds, ModelConfig(**{**TINY_MODEL, "lambda_sie": 0.0}), LossConfig(), cfg, None)
    with pytest.raises(AssertionError, match="sie index"):
        train(ds, ModelConfig(**TINY_MODEL), LossConfig(), cfg, SieScheme("domain", 2))


def test_scheme_table_mismatch():
    ds, cfg = tiny_run()
    with pytest.raises(ContractError):
        train(ds, ModelConfig(**TINY_MODEL), LossConfig(), cfg, SieScheme("domain+camera", 2, 2))
    with pytest.raises(ContractError):
        train(ds, ModelConfig(**TINY_MODEL), LossConfig(), cfg, None)


def test_triplet_delay_zeroes_weight():
    ds, cfg = tiny_run(triplet_from_epoch=1)
    res = train(ds, ModelConfig(**TINY_MODEL), LossConfig(lambda_t=1.0), cfg, SieScheme("domain", 2))
    assert all(e.loss_total == e.loss_ce for e in res.log if e.epoch == 0)
    assert all(e.loss_total == e.loss_ce + e.loss_tri for e in res.log if e.epoch == 1)


def test_small_step_decreases_loss():
    ds = synth_generate(4, 2, 8, seed=0, config=TINY_DATA)
    mc = ModelConfig(**TINY_MODEL)
    params = init_params(mc, 0)
    plan = sample_batch(ds, 4, 4, 2, np.random.default_rng(0))
    images = np.stack([ds[k].pixels for k in plan.record_indices])
    sie = [ds[k].domain for k in plan.record_indices]
    with ad.Tape():
        *_, before = batch_loss(params, images, sie, plan.labels, LossConfig())
    ad.backward(before, leaves=[t for _, t in params])
    arrays = {n: t.data for n, t in params}
    sgd_step(arrays, {n: t.grad for n, t in params}, {n: np.zeros_like(a) for n, a in arrays.items()},
             lr=1e-5, momentum=0.9, weight_decay=0.0)
    *_, after = batch_loss(params, images, sie, plan.labels, LossConfig())
    assert after.item() < before.item()


def test_non_finite_loss_aborts_with_last_params(tmp_path):
    ds, cfg = tiny_run()
    mc = ModelConfig(**TINY_MODEL)
    params = init_params(mc, 0)
    params["classifier"].data[0, 0] = np.nan
    with pytest.raises(NumericalError) as exc:
        train(ds, mc, LossConfig(), cfg, SieScheme("domain", 2), params=params, out_dir=tmp_path)
    assert exc.value.last_good is params
    assert not (tmp_path / "model.ckpt").exists()


def test_log_file_and_checkpoint(tmp_path):
    ds, cfg = tiny_run(checkpoint_every=1)
    train(ds, ModelConfig(**{**TINY_MODEL, "lambda_sie": 0.0}), LossConfig(), cfg, None,
          out_dir=tmp_path, log_path=tmp_path / "train.log")
    lines = (tmp_path / "train.log").read_text().splitlines()
    assert lines[0] == "# sie disabled (lambda_sie=0)" and lines[1] == trainer.LOG_HEADER
    assert len(lines) == 2 + 6 and (tmp_path / "model.ckpt").exists()


@pytest.mark.slow
def test_overfit_smoke():
    cfg = load_config()
    ds = synth_generate(4, 2, 8, seed=0, config=cfg.synth_config())
    tc = TrainConfig(**{**cfg.train_config().__dict__, "P": 4})
    res = train(ds, cfg.model_config(2, 4), cfg.loss_config(), tc, SieScheme("domain", 2))
    assert res.log[-1].loss_ce < 0.1
