"""Losses, Adam with cosine-annealed learning rate, and the seeded training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, OptimState
from .config import RunConfig, to_text
from .data import WindowSet
from .errors import NumericError, ShapeError
from .metrics import psnr, ssim
from .predictor import PredictorModel, predict_next

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
LOG_HEADER = ("epoch", "lr", "train_loss", "val_psnr", "val_ssim")


# -- losses ----------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def reconstruction_loss(pred, target) -> Tensor:
    """Mean absolute error over every pixel, channel and batch element."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return (pred - target).abs().mean()


def _grad_magnitudes(x: Tensor) -> tuple[Tensor, Tensor]:
    # backward differences on the valid region (row >= 1 and col >= 1)
    centre = x[..., 1:, 1:, :]
    du = (centre - x[..., :-1, 1:, :]).abs()
    dv = (centre - x[..., 1:, :-1, :]).abs()
    return du, dv


def gradient_loss(pred, target) -> Tensor:
    """Mean over valid pixels of the absolute mismatch in image-gradient magnitudes."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if pred.ndim < 3 or pred.shape[-3] < 2 or pred.shape[-2] < 2:
        raise ShapeError(f"gradient loss needs frames of at least 2x2, got {pred.shape}")
    pu, pv = _grad_magnitudes(pred)
    tu, tv = _grad_magnitudes(target)
    return ((tu - pu).abs() + (tv - pv).abs()).mean()


def total_loss(pred, target, lambda_g: float = 0.01) -> Tensor:
    loss = reconstruction_loss(pred, target)
    if lambda_g:
        loss = loss + lambda_g * gradient_loss(pred, target)
    return loss


# -- optimisation ----------------------------------------------------------


def cosine_anneal_lr(epoch: int, state: OptimState) -> float:
    if not 0 <= epoch <= state.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {state.total_epochs}]")
    if state.total_epochs == 0:
        return state.lr_max
    frac = epoch / state.total_epochs
    return state.lr_min + 0.5 * (state.lr_max - state.lr_min) * (1.0 + math.cos(math.pi * frac))


def adam_step(params: dict[str, Tensor], state: OptimState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to every parameter holding a gradient."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.count_nonzero(~np.isfinite(p.grad)))
            raise NumericError(f"non-finite gradient in {name}: {bad} of {p.grad.size} entries at step {state.step}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# -- loop ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_psnr: float
    val_ssim: float

    def row(self) -> tuple:
        return (self.epoch, self.lr, self.train_loss, self.val_psnr, self.val_ssim)


def predict_windows(model: PredictorModel, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(windows), batch_size):
            out.append(predict_next(model, windows[i : i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0,) + windows.shape[2:])


def score(preds: np.ndarray, targets: np.ndarray, window: int = 8, cap: float = 100.0) -> tuple[float, float]:
    if len(targets) == 0:
        return float("nan"), float("nan")
    ps = [psnr(p, t, 2.0, cap) for p, t in zip(preds, targets)]
    ss = [ssim(p, t, 2.0, window) for p, t in zip(preds, targets)]
    return float(np.mean(ps)), float(np.mean(ss))


def snapshot(model: PredictorModel, state: OptimState, epoch: int, rng: np.random.Generator, cfg: RunConfig, history) -> Checkpoint:
    return Checkpoint(
        params={n: t.data.copy() for n, t in model.named_parameters().items()},
        optim=state.copy(),
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        config=to_text(cfg),
        history=[r.row() for r in history],
    )


def restore(model: PredictorModel, ckpt: Checkpoint) -> None:
    params = model.named_parameters()
    if set(params) != set(ckpt.params):
        missing = set(params) ^ set(ckpt.params)
        raise ShapeError(f"checkpoint parameters do not match the model: {sorted(missing)}")
    for name, t in params.items():
        if t.data.shape != ckpt.params[name].shape:
            raise ShapeError(f"{name}: checkpoint shape {ckpt.params[name].shape} vs model {t.data.shape}")
        t.data = ckpt.params[name].astype(t.data.dtype, copy=True)


class TrainingAborted(NumericError):
    """Raised on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def fit(
    model: PredictorModel,
    train: WindowSet,
    cfg: RunConfig,
    val: WindowSet | None = None,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[EpochRecord, Checkpoint], None] | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train for ``cfg.training.epochs`` epochs; returns the final checkpoint and per-epoch log.

    Shuffling draws from a generator seeded by ``cfg.training.seed`` whose
    state is stored in every checkpoint, so resuming reproduces the
    uninterrupted run exactly.
    """
    tc = cfg.training
    params = model.named_parameters()
    if resume is None:
        rng = np.random.default_rng(tc.seed)
        state = OptimState(lr_max=tc.lr, lr_min=tc.lr_min, total_epochs=tc.epochs)
        history: list[EpochRecord] = []
        start = 0
    else:
        restore(model, resume)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        state = resume.optim.copy()
        history = [EpochRecord(*r) for r in resume.history]
        start = resume.epoch

    ckpt = snapshot(model, state, start, rng, cfg, history)
    for epoch in range(start, tc.epochs):
        lr = cosine_anneal_lr(epoch, state)
        order = rng.permutation(len(train))
        losses = []
        for b in range(0, len(order), tc.batch_size):
            idx = np.sort(order[b : b + tc.batch_size])
            model.zero_grad()
            pred = predict_next(model, train.windows[idx])
            loss = total_loss(pred, train.targets[idx], tc.lambda_g)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss {value} at epoch {epoch}, batch {b // tc.batch_size}", ckpt)
            loss.backward()
            try:
                adam_step(params, state, lr)
            except NumericError as exc:
                raise TrainingAborted(str(exc), ckpt) from None
            losses.append(value)
        if val is not None and len(val):
            vp, vs = score(predict_windows(model, val.windows), val.targets, cfg.eval.ssim_window, cfg.eval.psnr_cap)
        else:
            vp = vs = float("nan")
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), vp, vs)
        history.append(rec)
        ckpt = snapshot(model, state, epoch + 1, rng, cfg, history)
        log.info("epoch %d lr %.3g loss %.5f val psnr %.3f ssim %.4f", epoch, lr, rec.train_loss, vp, vs)
        if on_epoch is not None:
            on_epoch(rec, ckpt)
    return ckpt, history
