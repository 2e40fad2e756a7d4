import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vidpred.config import DataConfig
from vidpred.data import (
    ClampStats,
    Shape,
    denormalize,
    gen_dataset,
    gen_moving_shapes,
    make_windows,
    normalize,
    simulate,
)
from vidpred.errors import ConfigError, ShapeError
from vidpred.metrics import MetricReport, mse, psnr, score_frames, ssim

# -- generator -------------------------------------------------------------


def test_same_seed_same_sequence():
    cfg = DataConfig()
    np.testing.assert_array_equal(gen_moving_shapes(cfg, 20, seed=3), gen_moving_shapes(cfg, 20, seed=3))
    assert not np.array_equal(gen_moving_shapes(cfg, 20, seed=3), gen_moving_shapes(cfg, 20, seed=4))


def test_values_in_range_and_shape():
    seqs = gen_dataset(DataConfig(sequences=3, val_sequences=1, channels=3))
    assert seqs.shape == (4, 20, 16, 16, 3)
    assert seqs.min() >= -1 and seqs.max() <= 1


def test_pure_translation():
    cfg = DataConfig(bounce=False)
    sq = Shape("square", 3, np.array([5, 2]), np.array([0, 1]), np.array([0.8]))
    frames = simulate([sq], cfg, 4)
    bg = 2 * cfg.background - 1
    for t in range(3):
        shifted = np.full_like(frames[t], bg)
        shifted[:, 1:] = frames[t][:, :-1]
        np.testing.assert_array_equal(frames[t + 1], shifted)


def triangle(p0, v, hi, t):
    """Closed-form position of a point bouncing in [0, hi] at constant speed."""
    if hi == 0:
        return 0
    period = 2 * hi
    x = (p0 + v * t) % period
    return x if x <= hi else period - x


@pytest.mark.parametrize("p0,v", [(0, 1), (3, -1), (11, 1), (6, 2), (1, -3)])
def test_bounce_matches_closed_form(p0, v):
    cfg = DataConfig(bounce=True, speed_max=3)
    size = 5
    sq = Shape("square", size, np.array([p0, 4]), np.array([v, 0]), np.array([1.0]))
    hi = cfg.height - size
    for t in range(40):
        assert sq.pos[0] == triangle(p0, v, hi, t), t
        simulate([sq], cfg, 1)  # renders then steps once


def test_config_errors():
    with pytest.raises(ConfigError):
        gen_moving_shapes(DataConfig(size_max=20))
    with pytest.raises(ConfigError):
        gen_moving_shapes(DataConfig(speed_max=8))


def test_windows_cover_every_target():
    seqs = gen_dataset(DataConfig(sequences=2, val_sequences=0, length=6))
    ws = make_windows(seqs, 4)
    assert len(ws) == 2 * 5
    np.testing.assert_array_equal(ws.windows[0], np.repeat(seqs[0, :1], 4, axis=0))
    np.testing.assert_array_equal(ws.last, ws.windows[:, -1])


# -- normalisation ---------------------------------------------------------


def test_normalize_endpoints():
    np.testing.assert_array_equal(normalize(np.array([0.0, 1.0, 0.5])), [-1.0, 1.0, 0.0])


@given(arrays(np.float64, 10, elements=st.floats(0, 1)))
def test_normalize_round_trip(x):
    np.testing.assert_allclose(denormalize(normalize(x)), x, atol=1e-12)


def test_normalize_clamps_and_counts():
    stats = ClampStats()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = normalize(np.array([-0.5, 0.2, 1.7, 3.0]), stats)
    np.testing.assert_allclose(out, [-1.0, -0.6, 1.0, 1.0])
    assert stats.count == 3
    assert caught


# -- metrics ---------------------------------------------------------------


def loop_mse(p, t):
    return sum((a - b) ** 2 for a, b in zip(p.ravel(), t.ravel())) / p.size


def loop_ssim(p, t, win, data_range):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, w = p.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            a = p[i : i + win, j : j + win].ravel()
            b = t[i : i + win, j : j + win].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
            cov = ((a - ma) * (b - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_mse_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5, 1))
    assert mse(x, x) == 0.0
    assert mse(x + 0.3, x) == pytest.approx(0.09)
    for _ in range(10):
        a, b = rng.normal(size=(6, 6, 2)), rng.normal(size=(6, 6, 2))
        assert mse(a, b) == pytest.approx(loop_mse(a, b), abs=1e-12)


def test_psnr_cases():
    x = np.random.default_rng(1).random((8, 8))
    assert psnr(x, x) == 100.0
    assert psnr(np.clip(x, 0, 0.9) + 0.1, np.clip(x, 0, 0.9), data_range=1.0) == pytest.approx(20.0)
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rng.uniform(-1, 1, (8, 8)), rng.uniform(-1, 1, (8, 8))
        assert psnr(a, b) == pytest.approx(10 * math.log10(4.0 / loop_mse(a, b)), abs=1e-9)


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_psnr_monotone_in_mse(e1, e2):
    z = np.zeros(16)
    a, b = psnr(z + math.sqrt(e1), z), psnr(z + math.sqrt(e2), z)
    if e1 < e2:
        assert a >= b


def test_ssim_identity_symmetry_oracle():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (12, 10))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    for _ in range(5):
        a, b = rng.uniform(-1, 1, (12, 10)), rng.uniform(-1, 1, (12, 10))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert ssim(a, b) == pytest.approx(loop_ssim(a, b, 8, 2.0), abs=1e-12)


def test_ssim_constant_images_closed_form():
    c, d, L = 0.2, 0.3, 2.0
    c1 = (0.01 * L) ** 2
    expected = (2 * c * (c + d) + c1) / (c**2 + (c + d) ** 2 + c1)
    assert ssim(np.full((9, 9), c), np.full((9, 9), c + d)) == pytest.approx(expected, abs=1e-12)


def test_ssim_channels_averaged_and_small_image():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(-1, 1, (8, 8, 2)), rng.uniform(-1, 1, (8, 8, 2))
    assert ssim(a, b) == pytest.approx((ssim(a[..., 0], b[..., 0]) + ssim(a[..., 1], b[..., 1])) / 2)
    with pytest.raises(ShapeError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_ssim_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (8, 9)), rng.uniform(-1, 1, (8, 9))
    assert -1 <= ssim(a, b) <= 1


def test_report_csv(tmp_path):
    rng = np.random.default_rng(5)
    preds, targets = rng.uniform(-1, 1, (3, 8, 8, 1)), rng.uniform(-1, 1, (3, 8, 8, 1))
    rep = score_frames(preds, targets)
    assert len(rep.psnr) == 3
    # report MSE is on the [0, 1] scale
    assert rep.mse[0] == pytest.approx(mse(preds[0], targets[0]) / 4)
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "frame_index,psnr,ssim,mse" and len(lines) == 4


def test_copy_last_baseline_needs_no_model():
    seqs = gen_dataset(DataConfig(sequences=2, val_sequences=0))
    ws = make_windows(seqs, 4)
    rep = MetricReport()
    for p, t in zip(ws.last, ws.targets):
        rep.add(p, t)
    assert math.isfinite(rep.mean_psnr)
