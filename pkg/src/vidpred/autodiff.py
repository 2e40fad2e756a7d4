"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a vector-Jacobian product
closure.  ``backward`` walks the recorded graph in reverse creation order,
which is a valid topological order because a node is always created after
its inputs.  That makes the traversal deterministic without any sorting
heuristics.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

_ids = itertools.count()
_default_dtype = np.float64
_grad_enabled = True
_corrupt_backward = False


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupted_backward():
    """Test hook: perturb the conv weight gradient so gradient checks must fail."""
    global _corrupt_backward
    prev = _corrupt_backward
    _corrupt_backward = True
    try:
        yield
    finally:
        _corrupt_backward = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_ids)

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(build_graph(self), self)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)

    def tanh(self):
        return tanh(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- graph traversal -------------------------------------------------------


@dataclass
class ComputeGraph:
    """Nodes reachable from a root, in creation (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)


def build_graph(root: Tensor) -> ComputeGraph:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    nodes = [seen[k] for k in sorted(seen)]
    return ComputeGraph(nodes=nodes, leaves=[n for n in nodes if n._vjp is None])


def backward(graph: ComputeGraph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf in ``graph``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else _lift(a, Tensor(0.0))
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else _lift(a, Tensor(0.0))
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else _lift(a, Tensor(0.0))
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def tabs(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


# -- reductions and shape --------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts)

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp)


def tensordot(a: Tensor, b: Tensor, axes: tuple[Sequence[int], Sequence[int]]) -> Tensor:
    """Differentiable ``np.tensordot`` with explicit axis lists."""
    ad, bd = a.data, b.data
    a_ax = [x % ad.ndim for x in axes[0]]
    b_ax = [x % bd.ndim for x in axes[1]]
    a_free = [i for i in range(ad.ndim) if i not in a_ax]
    b_free = [i for i in range(bd.ndim) if i not in b_ax]
    out = np.tensordot(ad, bd, axes=(a_ax, b_ax))
    na = len(a_free)

    def vjp(g):
        g_a_free = list(range(na))
        g_b_free = list(range(na, g.ndim))
        # grad wrt a: contract g's b-free axes with b's free axes
        ga = np.tensordot(g, bd, axes=(g_b_free, b_free))
        # ga axes: a_free..., b_ax (in b_ax order) -> position them as a_ax
        order = a_free + a_ax
        ga = np.transpose(ga, np.argsort(order))
        gb = np.tensordot(ad, g, axes=(a_free, g_a_free))
        order_b = b_ax + b_free
        gb = np.transpose(gb, np.argsort(order_b))
        return ga, gb

    return _make(out, (a, b), vjp)


# -- softmax and similarity ------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-stabilised softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dimension, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


COSINE_EPS = 1e-12


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Broadcasting cosine similarity along ``axis``; eps added to each norm."""
    na = sqrt(tsum(a * a, axis=axis)) + COSINE_EPS
    nb = sqrt(tsum(b * b, axis=axis)) + COSINE_EPS
    return tsum(a * b, axis=axis) / (na * nb)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_sim expects equal-length vectors, got {a.shape} and {b.shape}")
    return cosine_similarity(a, b, axis=-1)


# -- spatial ---------------------------------------------------------------


def _as_batched(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    if x.ndim < 3:
        raise ShapeError(f"expected (..., H, W, C), got {x.shape}")
    lead = x.shape[:-3]
    return reshape(x, (-1,) + x.shape[-3:]), lead


def _patch_gather(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _patch_scatter(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    b, ho, wo, c, k, _ = cols.shape
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[
                ..., i, j
            ]
    return out


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def extract_patches(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """(B, H, W, C) -> (B, Ho, Wo, C, k, k) zero-padded sliding windows."""
    b, h, w, c = x.shape
    ho, wo = _out_extent(h, k, stride, pad), _out_extent(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"window {k} stride {stride} pad {pad} does not fit {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.ascontiguousarray(_patch_gather(xp, k, stride, ho, wo))

    def vjp(g):
        gp = _patch_scatter(g, h + 2 * pad, w + 2 * pad, stride)
        return (gp[:, pad : pad + h, pad : pad + w],)

    return _make(cols, (x,), vjp)


def fold_patches(cols: Tensor, out_hw: tuple[int, int], stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`extract_patches`: scatter-add windows into an (out_h, out_w) map."""
    b, ho, wo, c, k, _ = cols.shape
    h, w = out_hw
    hp = max(stride * (ho - 1) + k, h + 2 * pad)
    wp = max(stride * (wo - 1) + k, w + 2 * pad)
    full = _patch_scatter(cols.data, hp, wp, stride)
    out = full[:, pad : pad + h, pad : pad + w].copy()

    def vjp(g):
        gp = np.zeros((b, hp, wp, c), dtype=g.dtype)
        gp[:, pad : pad + h, pad : pad + w] = g
        return (np.ascontiguousarray(_patch_gather(gp, k, stride, ho, wo)),)

    return _make(out, (cols,), vjp)


def _weight_grad_hook(t: Tensor) -> Tensor:
    if not _corrupt_backward:
        return t
    return _make(t.data, (t,), lambda g: (g * 1.5,))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is (..., H, W, C_in) and ``kernel`` is (C_out, C_in, k, k).
    """
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    if x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {kernel.shape[1]}")
    xb, lead = _as_batched(x)
    cols = extract_patches(xb, k, stride, pad)
    out = tensordot(cols, _weight_grad_hook(kernel), axes=([3, 4, 5], [1, 2, 3]))
    if bias is not None:
        out = out + bias
    return reshape(out, lead + out.shape[1:])


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 2,
    pad: int = 1,
    output_padding: int = 1,
    bias: Tensor | None = None,
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``kernel`` is (C_in, C_out, k, k).

    Output extent is (H - 1) * stride - 2 * pad + k + output_padding.
    """
    if kernel.ndim != 4 or x.shape[-1] != kernel.shape[0]:
        raise ShapeError(f"kernel {kernel.shape} does not match input channels {x.shape[-1]}")
    k = kernel.shape[2]
    xb, lead = _as_batched(x)
    _, h, w, _ = xb.shape
    oh = (h - 1) * stride - 2 * pad + k + output_padding
    ow = (w - 1) * stride - 2 * pad + k + output_padding
    cols = tensordot(xb, kernel, axes=([3], [0]))  # (B, H, W, C_out, k, k)
    out = fold_patches(cols, (oh, ow), stride, pad)
    if bias is not None:
        out = out + bias
    return reshape(out, lead + out.shape[1:])


# -- gradient verification -------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    kink_retries: int = 3,
) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    ``x`` must be a leaf with ``requires_grad``; its data is perturbed in place
    and restored.  ``max_coords`` limits the check to a seeded random subset of
    coordinates for large parameter tensors.

    Central differences trade truncation error (large steps) against
    roundoff (small steps), and the best step differs per coordinate: tiny
    gradients drown in roundoff at ``eps`` while losses built from absolute
    values and leaky rectifiers have kinks that a wide stencil straddles.  So
    each coordinate is also tried at ``10 * eps``, and whenever the forward and
    backward one-sided slopes disagree (a kink inside the stencil) the step is
    shrunk tenfold, up to ``kink_retries`` times.  The best agreement is
    kept; a wrong gradient disagrees at every step size, so it still fails.
    """
    x.grad = None
    loss = f(x)
    backward(build_graph(loss), loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    f0 = float(loss.data)

    if not x.data.flags.c_contiguous:
        # a strided view would make reshape copy and the perturbations vanish
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
    worst = 0.0
    a_flat = analytic.reshape(-1)

    def central(i, orig, h):
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        return fp, fm

    def rel(a, num):
        return abs(a - num) / max(abs(a), abs(num), 1e-8)

    with no_grad():
        for i in coords:
            orig = flat[i]
            a = float(a_flat[i])
            fp, fm = central(i, orig, 10 * eps)
            best = rel(a, (fp - fm) / (20 * eps))
            h = eps
            for _ in range(kink_retries + 1):
                fp, fm = central(i, orig, h)
                best = min(best, rel(a, (fp - fm) / (2 * h)))
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) <= 1e-5 * max(abs(fwd), abs(bwd), 1e-6):
                    break
                h /= 10
            worst = max(worst, best)
    return worst
