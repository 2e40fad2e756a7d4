import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from vidpred.autodiff import Tensor
from vidpred.checkpoint import OptimState
from vidpred.config import RunConfig, replace
from vidpred.data import gen_dataset, make_windows
from vidpred.errors import NumericError, ShapeError
from vidpred.predictor import build_model
from vidpred.training import (
    adam_step,
    cosine_anneal_lr,
    fit,
    gradient_loss,
    reconstruction_loss,
    total_loss,
)


# -- losses ----------------------------------------------------------------


def test_reconstruction_cases():
    t = np.random.default_rng(0).uniform(-1, 1, (4, 4, 1))
    assert reconstruction_loss(t, t).item() == 0.0
    assert reconstruction_loss(t + 0.5, t).item() == pytest.approx(0.5, abs=1e-15)


def test_reconstruction_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, t = rng.normal(size=(5, 6, 2)), rng.normal(size=(5, 6, 2))
        assert reconstruction_loss(p, t).item() == pytest.approx(oracles.l1(p, t), abs=1e-12)


def test_reconstruction_shape_mismatch():
    with pytest.raises(ShapeError):
        reconstruction_loss(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))


def test_gradient_loss_identical_zero():
    t = np.random.default_rng(2).normal(size=(4, 4, 1))
    assert gradient_loss(t, t).item() == 0.0


def test_gradient_loss_step_edge():
    # left half -1, right half +1: a single column of horizontal gradients of size 2
    target = np.full((4, 4, 1), -1.0)
    target[:, 2:] = 1.0
    pred = np.zeros((4, 4, 1))
    # valid region is rows 1..3, cols 1..3; only col 2 carries |dv| = 2
    expected = (3 * 2.0) / 9
    assert oracles.grad_loss(pred, target) == pytest.approx(expected)
    assert gradient_loss(pred, target).item() == pytest.approx(expected, abs=1e-15)


def test_gradient_loss_symmetric_and_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p, t = rng.normal(size=(5, 4, 2)), rng.normal(size=(5, 4, 2))
        assert gradient_loss(p, t).item() == pytest.approx(gradient_loss(t, p).item(), abs=1e-15)
        assert gradient_loss(p, t).item() == pytest.approx(oracles.grad_loss(p, t), abs=1e-12)


def test_gradient_loss_degenerate():
    with pytest.raises(ShapeError):
        gradient_loss(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)))


def test_total_loss_composition():
    rng = np.random.default_rng(4)
    p, t = rng.normal(size=(6, 6, 1)), rng.normal(size=(6, 6, 1))
    assert total_loss(p, t, 0.0).item() == reconstruction_loss(p, t).item()
    assert total_loss(t, t, 0.01).item() == 0.0
    expect = oracles.l1(p, t) + 0.01 * oracles.grad_loss(p, t)
    assert total_loss(p, t, 0.01).item() == pytest.approx(expect, abs=1e-12)


@given(
    arrays(np.float64, (3, 3, 1), elements=st.floats(-1, 1)),
    arrays(np.float64, (3, 3, 1), elements=st.floats(-1, 1)),
    st.floats(0, 1),
)
def test_total_loss_nonnegative_zero_iff_equal(p, t, lam):
    value = total_loss(p, t, lam).item()
    assert value >= 0
    assert (value == 0) == bool(np.array_equal(p, t))


# -- optimiser -------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    state = OptimState()
    state.m["p"], state.v["p"] = np.array([0.5, 0.5]), np.array([0.0, 0.0])
    before = p.data.copy()
    # zero-valued moments with zero gradients: no movement
    state.m["p"][:] = 0.0
    adam_step({"p": p}, state, 1e-3)
    np.testing.assert_array_equal(p.data, before)
    state.m["p"][:] = 0.4
    state.v["p"][:] = 0.3
    p.grad = np.zeros(2)
    adam_step({"p": p}, state, 0.0)
    np.testing.assert_allclose(state.m["p"], 0.36)
    np.testing.assert_allclose(state.v["p"], 0.3 * 0.999)


def test_adam_first_step_is_lr_sign():
    g = np.array([3.0, -0.5, 100.0])
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = g
    adam_step({"p": p}, OptimState(), 0.01)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-6)


def reference_adam(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v, trace = x0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(x)
    return trace


def test_adam_matches_scalar_reference_on_quadratic():
    # f(x) = 1.5 (x - 2)^2
    p = Tensor(np.array([5.0]), requires_grad=True)
    state = OptimState()
    got = []
    for _ in range(10):
        p.grad = 3.0 * (p.data - 2.0)
        adam_step({"p": p}, state, 0.1)
        got.append(float(p.data[0]))
    np.testing.assert_allclose(got, reference_adam(5.0, lambda x: 3.0 * (x - 2.0), 0.1, 10), rtol=0, atol=1e-12)


def test_adam_rejects_nan_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError, match="p"):
        adam_step({"p": p}, OptimState(), 0.1)


def test_cosine_schedule():
    s = OptimState(lr_max=2e-4, lr_min=1e-5, total_epochs=30)
    assert cosine_anneal_lr(0, s) == pytest.approx(2e-4)
    assert cosine_anneal_lr(30, s) == pytest.approx(1e-5)
    assert cosine_anneal_lr(15, s) == pytest.approx((2e-4 + 1e-5) / 2)
    assert cosine_anneal_lr(10, s) > cosine_anneal_lr(11, s)
    with pytest.raises(ValueError):
        cosine_anneal_lr(31, s)
    with pytest.raises(ValueError):
        cosine_anneal_lr(-1, s)


# -- loop ------------------------------------------------------------------


def tiny_run(epochs=2, seed=0, **model):
    cfg = replace(
        RunConfig(),
        model={"features": 8, "memory_items": 2, **model},
        training={"epochs": epochs, "batch_size": 4, "seed": seed, "lr": 1e-3},
        data={"height": 8, "width": 8, "size_min": 2, "size_max": 3, "sequences": 3, "val_sequences": 1, "length": 5},
        eval={"ssim_window": 4},
    )
    seqs = gen_dataset(cfg.data)
    train = make_windows(seqs[:3], cfg.model.delta)
    val = make_windows(seqs[3:], cfg.model.delta)
    return cfg, train, val


def test_fit_zero_epochs_returns_init():
    cfg, train, val = tiny_run(epochs=0)
    model = build_model(cfg.model, 1, seed=0)
    init = {n: t.data.copy() for n, t in model.named_parameters().items()}
    ckpt, log = fit(model, train, cfg, val)
    assert log == [] and ckpt.epoch == 0
    for n, arr in init.items():
        np.testing.assert_array_equal(ckpt.params[n], arr)


def test_fit_same_seed_same_log():
    cfg, train, val = tiny_run()
    logs = []
    for _ in range(2):
        _, log = fit(build_model(cfg.model, 1, seed=0), train, cfg, val)
        logs.append([r.row() for r in log])
    assert logs[0] == logs[1]
    assert len(logs[0]) == 2


def test_fit_resume_is_bitwise():
    cfg, train, val = tiny_run(epochs=3)
    full_ckpt, full_log = fit(build_model(cfg.model, 1, seed=0), train, cfg, val)

    saved = {}
    fit(
        build_model(cfg.model, 1, seed=0),
        train,
        cfg,
        val,
        on_epoch=lambda rec, ck: saved.setdefault(rec.epoch, ck),
    )
    resumed_ckpt, resumed_log = fit(build_model(cfg.model, 1, seed=99), train, cfg, val, resume=saved[0])
    assert [r.row() for r in resumed_log] == [r.row() for r in full_log]
    for n, arr in full_ckpt.params.items():
        np.testing.assert_array_equal(resumed_ckpt.params[n], arr)


def test_fit_aborts_on_non_finite_loss():
    from vidpred.training import TrainingAborted

    cfg, train, val = tiny_run(epochs=1)
    model = build_model(cfg.model, 1, seed=0)
    train.targets[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingAborted) as info:
        fit(model, train, cfg, val)
    assert info.value.checkpoint.epoch == 0
