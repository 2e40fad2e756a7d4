"""Deterministic moving-shapes video and the window/target pairs used for training."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import DataConfig
from .errors import ConfigError
from .predictor import pad_window


@dataclass
class Shape:
    kind: str
    size: int
    pos: np.ndarray  # (row, col) of the top-left corner
    vel: np.ndarray  # (d_row, d_col) pixels per frame
    color: np.ndarray  # (C,) raw intensity in [0, 1]


def _mask(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    c = (size - 1) / 2.0
    i, j = np.mgrid[:size, :size]
    return (i - c) ** 2 + (j - c) ** 2 <= (size / 2.0) ** 2


def reflect(p: int, v: int, hi: int) -> tuple[int, int]:
    """Fold a position back into [0, hi], flipping the velocity at each bounce."""
    while p < 0 or p > hi:
        if p < 0:
            p, v = -p, -v
        if p > hi:
            p, v = 2 * hi - p, -v
        if hi == 0:
            return 0, v
    return p, v


def render(shapes: list[Shape], height: int, width: int, channels: int, background: float = 0.0) -> np.ndarray:
    canvas = np.full((height, width, channels), background)
    for s in shapes:
        m = _mask(s.kind, s.size)
        r0, c0 = int(s.pos[0]), int(s.pos[1])
        rs, cs = max(r0, 0), max(c0, 0)
        re, ce = min(r0 + s.size, height), min(c0 + s.size, width)
        if rs >= re or cs >= ce:
            continue
        sub = m[rs - r0 : re - r0, cs - c0 : ce - c0]
        region = canvas[rs:re, cs:ce]
        region[sub] = np.maximum(region[sub], s.color)
    return canvas


def random_shapes(cfg: DataConfig, rng: np.random.Generator) -> list[Shape]:
    shapes = []
    for _ in range(cfg.shapes):
        kind = cfg.kinds[rng.integers(len(cfg.kinds))]
        size = int(rng.integers(cfg.size_min, cfg.size_max + 1))
        pos = np.array([rng.integers(0, cfg.height - size + 1), rng.integers(0, cfg.width - size + 1)])
        vel = np.zeros(2, dtype=int)
        while cfg.speed_max > 0 and not vel.any():
            vel = rng.integers(-cfg.speed_max, cfg.speed_max + 1, size=2)
        color = rng.uniform(cfg.intensity_min, cfg.intensity_max, size=cfg.channels)
        shapes.append(Shape(kind, size, pos, vel, color))
    return shapes


def step_shapes(shapes: list[Shape], cfg: DataConfig) -> None:
    for s in shapes:
        pos = s.pos + s.vel
        if cfg.bounce:
            pr, vr = reflect(int(pos[0]), int(s.vel[0]), cfg.height - s.size)
            pc, vc = reflect(int(pos[1]), int(s.vel[1]), cfg.width - s.size)
            pos, s.vel = np.array([pr, pc]), np.array([vr, vc])
        s.pos = pos


def simulate(shapes: list[Shape], cfg: DataConfig, length: int) -> np.ndarray:
    """Render ``length`` frames of the given shapes, normalised to [-1, 1]."""
    frames = []
    for _ in range(length):
        frames.append(render(shapes, cfg.height, cfg.width, cfg.channels, cfg.background))
        step_shapes(shapes, cfg)
    return normalize(np.stack(frames))


def gen_moving_shapes(cfg: DataConfig, length: int | None = None, seed: int | None = None) -> np.ndarray:
    """One (T, H, W, C) sequence, fully determined by ``seed`` (defaults to ``cfg.seed``)."""
    if cfg.size_max > min(cfg.height, cfg.width):
        raise ConfigError(f"shape size {cfg.size_max} exceeds canvas {cfg.height}x{cfg.width}")
    if cfg.speed_max >= min(cfg.height, cfg.width) / 2:
        raise ConfigError("velocity bound must stay below half the canvas")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return simulate(random_shapes(cfg, rng), cfg, cfg.length if length is None else length)


def gen_dataset(cfg: DataConfig, n_sequences: int | None = None, length: int | None = None) -> np.ndarray:
    """(S, T, H, W, C) sequences; sequence i is seeded by (cfg.seed, i)."""
    n = cfg.sequences + cfg.val_sequences if n_sequences is None else n_sequences
    return np.stack([gen_moving_shapes(cfg, length, seed=[cfg.seed, i]) for i in range(n)])


class ClampStats:
    """Counts values clamped by :func:`normalize`."""

    def __init__(self):
        self.count = 0


def normalize(raw: np.ndarray, stats: ClampStats | None = None) -> np.ndarray:
    """Map [0, 1] to [-1, 1]; out-of-range input is clamped and counted."""
    raw = np.asarray(raw, dtype=np.float64)
    bad = int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    if bad:
        if stats is not None:
            stats.count += bad
        warnings.warn(f"clamped {bad} values outside [0, 1]", RuntimeWarning, stacklevel=2)
        raw = np.clip(raw, 0.0, 1.0)
    return 2.0 * raw - 1.0


def denormalize(frames: np.ndarray) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float64) + 1.0) / 2.0


@dataclass
class WindowSet:
    windows: np.ndarray  # (N, delta, H, W, C)
    targets: np.ndarray  # (N, H, W, C)
    last: np.ndarray  # (N, H, W, C) copy-last-frame prediction
    sequence: np.ndarray  # (N,) source sequence index

    def __len__(self) -> int:
        return len(self.targets)


def make_windows(sequences: np.ndarray, delta: int) -> WindowSet:
    """Every (window, next frame) pair, including left-padded early windows."""
    wins, tgts, last, seq = [], [], [], []
    for s, frames in enumerate(sequences):
        for t in range(1, frames.shape[0]):
            wins.append(pad_window(frames, t, delta))
            tgts.append(frames[t])
            last.append(frames[t - 1])
            seq.append(s)
    return WindowSet(np.stack(wins), np.stack(tgts), np.stack(last), np.array(seq))
