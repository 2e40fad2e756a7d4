"""Frame quality metrics: per-pixel MSE, PSNR with a zero-error cap, and windowed SSIM."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CAP = 100.0
K1, K2 = 0.01, 0.03


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def psnr(pred, target, data_range: float = 2.0, cap: float = PSNR_CAP) -> float:
    err = mse(pred, target)
    if err == 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(data_range**2 / err)))


def ssim(pred, target, data_range: float = 2.0, window: int = 8) -> float:
    """Mean SSIM over all ``window`` x ``window`` windows at stride 1.

    Inputs are (H, W) or (H, W, C); channels are scored separately and averaged.
    Window statistics use population (biased) variances.
    """
    p, t = _pair(pred, target)
    if p.ndim == 2:
        p, t = p[:, :, None], t[:, :, None]
    if p.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (H, W, C), got {p.shape}")
    if p.shape[0] < window or p.shape[1] < window:
        raise ShapeError(f"image {p.shape[:2]} smaller than the {window}x{window} window")
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2

    def wmean(a):
        return sliding_window_view(a, (window, window), axis=(0, 1)).mean(axis=(-2, -1))

    mx, my = wmean(p), wmean(t)
    vx = wmean(p * p) - mx * mx
    vy = wmean(t * t) - my * my
    cxy = wmean(p * t) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


@dataclass
class MetricReport:
    """Per-frame scores; ``mse`` is per pixel on [0, 1]-scaled intensities."""

    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)

    def add(self, pred, target, data_range: float = 2.0, cap: float = PSNR_CAP, window: int = 8) -> None:
        self.psnr.append(psnr(pred, target, data_range, cap))
        self.ssim.append(ssim(pred, target, data_range, window))
        # [-1, 1] frames: halving the error rescales to the [0, 1] convention
        self.mse.append(mse(np.asarray(pred) / data_range, np.asarray(target) / data_range))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "psnr", "ssim", "mse"])
            for i, row in enumerate(zip(self.psnr, self.ssim, self.mse)):
                w.writerow([i, *(repr(float(v)) for v in row)])


def score_frames(preds, targets, data_range: float = 2.0, cap: float = PSNR_CAP, window: int = 8) -> MetricReport:
    report = MetricReport()
    for p, t in zip(preds, targets):
        report.add(p, t, data_range, cap, window)
    return report
