"""Local filter memory: per-pixel memory addressing and dynamic filter generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


@dataclass
class MemoryBank:
    """N learnable prototype vectors of width C, stored as an (N, C) matrix."""

    items: Tensor

    @property
    def n_items(self) -> int:
        return self.items.shape[0]

    @property
    def channels(self) -> int:
        return self.items.shape[1]


@dataclass
class FilterGenerator:
    """Per-pixel linear map from a memory readout to a flattened kernel stack."""

    weights: Tensor  # (C, n_out)
    bias: Tensor  # (n_out,)
    k: int
    c_out: int
    c_in: int
    depthwise: bool = False

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        if self.depthwise:
            return (self.c_in, self.k, self.k)
        return (self.c_out, self.c_in, self.k, self.k)


def init_memory(n_items: int, channels: int, rng: np.random.Generator) -> MemoryBank:
    if n_items < 1 or channels < 1:
        raise ShapeError(f"memory needs N >= 1 and C >= 1, got {n_items}x{channels}")
    items = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(n_items, channels))
    return MemoryBank(Tensor(items, requires_grad=True, name="memory"))


def delta_kernel(c_out: int, c_in: int, k: int, depthwise: bool = False) -> np.ndarray:
    """Kernel stack that maps each channel to itself (center tap 1)."""
    r = k // 2
    if depthwise:
        out = np.zeros((c_in, k, k))
        out[:, r, r] = 1.0
        return out
    out = np.zeros((c_out, c_in, k, k))
    for c in range(min(c_out, c_in)):
        out[c, c, r, r] = 1.0
    return out


def init_filter_generator(
    channels: int,
    k: int,
    rng: np.random.Generator,
    depthwise: bool = False,
    weight_std: float = 1e-2,
) -> FilterGenerator:
    if k % 2 == 0:
        raise ShapeError(f"filter size must be odd, got {k}")
    bias = delta_kernel(channels, channels, k, depthwise).reshape(-1)
    weights = rng.normal(0.0, weight_std / np.sqrt(channels), size=(channels, bias.size))
    return FilterGenerator(
        weights=Tensor(weights, requires_grad=True, name="filter_gen.weights"),
        bias=Tensor(bias, requires_grad=True, name="filter_gen.bias"),
        k=k,
        c_out=channels,
        c_in=channels,
        depthwise=depthwise,
    )


def address_memory(z: Tensor, memory: MemoryBank) -> Tensor:
    """Soft addressing weights (..., H, W, N): softmax over items of cosine(z[u, v], m_i)."""
    if z.shape[-1] != memory.channels:
        raise ShapeError(f"feature has {z.shape[-1]} channels, memory has {memory.channels}")
    q = ad.expand_dims(z, -2)  # (..., H, W, 1, C)
    sims = ad.cosine_similarity(q, memory.items, axis=-1)  # (..., H, W, N)
    return ad.softmax_lastdim(sims)


def read_memory(w: Tensor, memory: MemoryBank) -> Tensor:
    """Convex combination of memory rows at each pixel."""
    if w.shape[-1] != memory.n_items:
        raise ShapeError(f"weights address {w.shape[-1]} items, memory has {memory.n_items}")
    return ad.matmul(w, memory.items)


def generate_filters(m_hat: Tensor, gen: FilterGenerator) -> Tensor:
    if m_hat.shape[-1] != gen.weights.shape[0]:
        raise ShapeError(f"readout has {m_hat.shape[-1]} channels, generator expects {gen.weights.shape[0]}")
    flat = ad.matmul(m_hat, gen.weights) + gen.bias
    return flat.reshape(m_hat.shape[:-1] + gen.kernel_shape)


def memory_filters(z: Tensor, memory: MemoryBank, gen: FilterGenerator, trace: dict | None = None) -> Tensor:
    w = address_memory(z, memory)
    if trace is not None:
        trace["address_weights"] = w.data
    return generate_filters(read_memory(w, memory), gen)
