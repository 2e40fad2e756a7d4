"""Global context propagation: iterated non-local self-attention with a residual projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


@dataclass
class GcpnParams:
    """Projections shared by every propagation step."""

    w_theta: Tensor
    w_phi: Tensor
    w_g: Tensor
    w_o: Tensor
    steps: int = 2

    @property
    def channels(self) -> int:
        return self.w_theta.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_theta": self.w_theta, "w_phi": self.w_phi, "w_g": self.w_g, "w_o": self.w_o}


def init_gcpn(channels: int, steps: int, rng: np.random.Generator, out_std: float = 0.1) -> GcpnParams:
    if steps < 1:
        raise ShapeError(f"propagation needs at least one step, got {steps}")
    std = 1.0 / np.sqrt(channels)

    def mat(name, s):
        return Tensor(rng.normal(0.0, s, size=(channels, channels)), requires_grad=True, name=f"gcpn.{name}")

    return GcpnParams(
        w_theta=mat("w_theta", std),
        w_phi=mat("w_phi", std),
        w_g=mat("w_g", std),
        w_o=mat("w_o", out_std * std),
        steps=steps,
    )


def propagate_step(h: Tensor, p: GcpnParams, trace: list | None = None) -> Tensor:
    """One attention step over flattened positions: softmax((h Wθ)(h Wφ)ᵀ) (h Wg).

    ``h`` is (..., P, C).  The softmax runs along each query row.
    """
    if h.ndim < 2 or h.shape[-1] != p.channels:
        raise ShapeError(f"state must be (..., P, {p.channels}), got {h.shape}")
    theta = ad.matmul(h, p.w_theta)
    phi = ad.matmul(h, p.w_phi)
    affinity = ad.matmul(theta, phi.transpose(tuple(range(phi.ndim - 2)) + (phi.ndim - 1, phi.ndim - 2)))
    attn = ad.softmax_lastdim(affinity)
    if trace is not None:
        trace.append(attn.data)
    return ad.matmul(attn, ad.matmul(h, p.w_g))


def flatten_positions(z: Tensor) -> Tensor:
    """(..., H, W, C) -> (..., H*W, C), row-major over (u, v)."""
    return z.reshape(z.shape[:-3] + (z.shape[-3] * z.shape[-2], z.shape[-1]))


def unflatten_positions(h: Tensor, height: int, width: int) -> Tensor:
    return h.reshape(h.shape[:-2] + (height, width, h.shape[-1]))


def propagate(z: Tensor, p: GcpnParams, max_positions: int = 1024, trace: list | None = None) -> Tensor:
    """Run ``p.steps`` propagation steps and add the projected result back onto ``z``."""
    height, width = z.shape[-3], z.shape[-2]
    if height * width > max_positions:
        raise ShapeError(
            f"{height}x{width} positions exceed the dense attention cap of {max_positions}; "
            "raise max_positions explicitly"
        )
    h = flatten_positions(z)
    for _ in range(p.steps):
        h = propagate_step(h, p, trace)
    return z + unflatten_positions(ad.matmul(h, p.w_o), height, width)
