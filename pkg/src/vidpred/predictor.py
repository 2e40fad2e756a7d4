"""Frame predictor: U-shaped encoder/decoder with context propagation and memory filtering at the bottleneck."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError
from .gcpn import GcpnParams, init_gcpn, propagate
from .lfmn import FilterGenerator, MemoryBank, delta_kernel, init_filter_generator, init_memory, memory_filters

# fixed stream ids keep each group's initialisation independent of which others exist
PARAM_GROUPS = ("encoder", "gcpn", "memory", "filter_gen", "decoder")
LEAK = 0.2


@dataclass
class PredictorModel:
    cfg: ModelConfig
    image_channels: int
    convs: dict[str, Tensor] = field(default_factory=dict)
    gcpn: GcpnParams | None = None
    memory: MemoryBank | None = None
    filter_gen: FilterGenerator | None = None

    @property
    def delta(self) -> int:
        return self.cfg.delta

    def named_parameters(self) -> dict[str, Tensor]:
        out = {n: t for n, t in self.convs.items() if n.startswith("encoder.")}
        if self.gcpn is not None:
            out.update({f"gcpn.{n}": t for n, t in self.gcpn.tensors().items()})
        if self.memory is not None:
            out["memory.items"] = self.memory.items
        if self.filter_gen is not None:
            out["filter_gen.weights"] = self.filter_gen.weights
            out["filter_gen.bias"] = self.filter_gen.bias
        out.update({n: t for n, t in self.convs.items() if n.startswith("decoder.")})
        return out

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


def _conv_weight(rng, c_out, c_in, k, gain=np.sqrt(2.0 / (1.0 + LEAK**2))):
    std = gain / np.sqrt(c_in * k * k)
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


def build_model(cfg: ModelConfig, image_channels: int = 1, seed: int = 0) -> PredictorModel:
    """Initialise every parameter group from its own seeded stream."""
    ad.set_default_dtype(cfg.dtype)
    c, half = cfg.features, cfg.features // 2
    rngs = {g: np.random.default_rng([seed, i]) for i, g in enumerate(PARAM_GROUPS)}
    enc, dec = rngs["encoder"], rngs["decoder"]

    def param(name, arr):
        # contiguous so restored checkpoints and in-place updates see the same layout
        return Tensor(np.ascontiguousarray(arr), requires_grad=True, name=name)

    convs = {
        "encoder.conv0.weight": param("encoder.conv0.weight", _conv_weight(enc, half, cfg.delta * image_channels, 3)),
        "encoder.conv0.bias": param("encoder.conv0.bias", np.zeros(half)),
        "encoder.down1.weight": param("encoder.down1.weight", _conv_weight(enc, half, half, 3)),
        "encoder.down1.bias": param("encoder.down1.bias", np.zeros(half)),
        "encoder.down2.weight": param("encoder.down2.weight", _conv_weight(enc, c, half, 3)),
        "encoder.down2.bias": param("encoder.down2.bias", np.zeros(c)),
    }
    skip = half if cfg.skip_connections else 0
    # transposed kernels are (C_in, C_out, k, k)
    convs.update(
        {
            "decoder.up1.weight": param("decoder.up1.weight", _conv_weight(dec, half, c, 3).transpose(1, 0, 2, 3)),
            "decoder.up1.bias": param("decoder.up1.bias", np.zeros(half)),
            "decoder.up0.weight": param(
                "decoder.up0.weight", _conv_weight(dec, half, half + skip, 3).transpose(1, 0, 2, 3)
            ),
            "decoder.up0.bias": param("decoder.up0.bias", np.zeros(half)),
            "decoder.out.weight": param(
                "decoder.out.weight", _conv_weight(dec, image_channels, half + skip, 3, gain=1.0)
            ),
            "decoder.out.bias": param("decoder.out.bias", np.zeros(image_channels)),
        }
    )
    model = PredictorModel(cfg=cfg, image_channels=image_channels, convs=convs)
    if cfg.use_gcpn:
        model.gcpn = init_gcpn(c, cfg.gcpn_steps, rngs["gcpn"], out_std=cfg.gcpn_out_std)
    if cfg.lfmn_active:
        model.memory = init_memory(cfg.memory_items, c, rngs["memory"])
        model.filter_gen = init_filter_generator(
            c, cfg.kernel_size, rngs["filter_gen"], cfg.depthwise_filters, cfg.filter_weight_std
        )
    return model


# -- windowing -------------------------------------------------------------


def window_indices(t: int, delta: int) -> list[int]:
    """0-based frame indices of the delta-window ending at the t-th frame (1-based)."""
    if t < 1:
        raise ShapeError("a window needs at least one frame")
    return [max(0, t - delta + i) for i in range(delta)]


def pad_window(frames, t: int | None = None, delta: int = 4):
    """Last ``delta`` frames ending at frame ``t`` (1-based), left-padded with the first frame.

    ``frames`` is (T, H, W, C) or batched (..., T, H, W, C); a plain list of
    frames is also accepted.
    """
    if isinstance(frames, (list, tuple)):
        if not frames:
            raise ShapeError("cannot window an empty sequence")
        frames = np.stack(frames)
    if frames.ndim < 4 or frames.shape[-4] == 0:
        raise ShapeError("cannot window an empty sequence")
    t = frames.shape[-4] if t is None else t
    if t > frames.shape[-4]:
        raise ShapeError(f"t={t} beyond sequence length {frames.shape[-4]}")
    return np.take(frames, window_indices(t, delta), axis=-4)


def stack_window(window) -> Tensor:
    """(..., delta, H, W, C) -> (..., H, W, delta*C) channel concatenation, frame-major."""
    data = window.data if isinstance(window, Tensor) else np.asarray(window)
    nd = data.ndim
    moved = np.moveaxis(data, nd - 4, nd - 2)  # (..., H, W, delta, C)
    return Tensor(moved.reshape(moved.shape[:-2] + (-1,)), dtype=ad.get_default_dtype())


# -- forward pieces --------------------------------------------------------


def _conv(model, x, name, stride):
    return ad.conv2d(x, model.convs[f"{name}.weight"], stride=stride, pad=1, bias=model.convs[f"{name}.bias"])


def _up(model, x, name):
    return ad.conv_transpose2d(
        x, model.convs[f"{name}.weight"], stride=2, pad=1, output_padding=1, bias=model.convs[f"{name}.bias"]
    )


def encode(model: PredictorModel, window) -> tuple[Tensor, list[Tensor]]:
    """Encode a (..., delta, H, W, C_img) window to Z (..., H/4, W/4, C) plus skip activations."""
    shape = window.shape
    if shape[-4] != model.delta:
        raise ShapeError(f"window has {shape[-4]} frames, model expects {model.delta}")
    if shape[-3] % 4 or shape[-2] % 4:
        raise ShapeError(f"frame extents {shape[-3]}x{shape[-2]} must be divisible by 4")
    x = stack_window(window)
    e0 = ad.leaky_relu(_conv(model, x, "encoder.conv0", 1), LEAK)
    e1 = ad.leaky_relu(_conv(model, e0, "encoder.down1", 2), LEAK)
    z = ad.leaky_relu(_conv(model, e1, "encoder.down2", 2), LEAK)
    return z, [e0, e1]


def decode(model: PredictorModel, z_hat: Tensor, skips: list[Tensor]) -> Tensor:
    e0, e1 = skips
    d1 = ad.leaky_relu(_up(model, z_hat, "decoder.up1"), LEAK)
    if model.cfg.skip_connections:
        d1 = ad.concat([d1, e1], axis=-1)
    d0 = ad.leaky_relu(_up(model, d1, "decoder.up0"), LEAK)
    if model.cfg.skip_connections:
        d0 = ad.concat([d0, e0], axis=-1)
    return ad.tanh(_conv(model, d0, "decoder.out", 1))


def dynamic_filter(z_bar: Tensor, filters: Tensor) -> Tensor:
    """Convolve each pixel's neighbourhood with that pixel's own kernel stack.

    ``filters`` is (..., H, W, C_out, C_in, k, k), or (..., H, W, C, k, k) for
    depthwise kernels.  Borders are zero-padded.
    """
    lead = z_bar.shape[:-3]
    h, w, c = z_bar.shape[-3:]
    depthwise = filters.ndim == z_bar.ndim + 2
    if filters.shape[: len(lead) + 2] != lead + (h, w):
        raise ShapeError(f"filters {filters.shape} do not match feature extents {z_bar.shape}")
    k = filters.shape[-1]
    c_in = filters.shape[-3]
    if c_in != c or filters.shape[-2] != k or k % 2 == 0:
        raise ShapeError(f"filters {filters.shape} incompatible with {c} input channels")
    zb = z_bar.reshape((-1, h, w, c))
    patches = ad.extract_patches(zb, k, 1, k // 2)  # (B, H, W, C, k, k)
    if depthwise:
        fb = filters.reshape((-1, h, w, c, k, k))
        out = (patches * fb).sum(axis=(-2, -1))
    else:
        c_out = filters.shape[-4]
        fb = filters.reshape((-1, h, w, c_out, c * k * k))
        out = ad.matmul(fb, patches.reshape((-1, h, w, c * k * k, 1))).reshape((-1, h, w, c_out))
    return out.reshape(lead + out.shape[-3:])


def fuse(model: PredictorModel, z: Tensor, trace: dict | None = None) -> Tensor:
    """Context propagation on Z, filtered by memory-generated per-pixel kernels."""
    z_bar = z
    if model.gcpn is not None:
        attn = [] if trace is not None else None
        z_bar = propagate(z, model.gcpn, model.cfg.max_positions, attn)
        if trace is not None:
            trace["attention"] = attn
    if model.memory is not None:
        filters = memory_filters(z, model.memory, model.filter_gen, trace)
        return dynamic_filter(z_bar, filters)
    return z_bar


def predict_next(model: PredictorModel, window, trace: dict | None = None) -> Tensor:
    """Predict the frame after a (..., delta, H, W, C_img) window; output is in (-1, 1)."""
    z, skips = encode(model, window)
    z_hat = fuse(model, z, trace)
    if trace is not None:
        trace["z"], trace["z_hat"] = z.data, z_hat.data
    return decode(model, z_hat, skips)


def plain_forward(model: PredictorModel, window) -> Tensor:
    """Encoder straight into decoder, bypassing both bottleneck streams."""
    z, skips = encode(model, window)
    return decode(model, z, skips)


def rollout(model: PredictorModel, seed, n: int, trace: list | None = None) -> np.ndarray:
    """Recursively predict ``n`` frames, sliding the window over real then predicted frames.

    ``seed`` is (..., T, H, W, C).  ``trace``, if given, receives the history
    indices each step's window was built from (seed frames first, then
    predictions in order).
    """
    if n < 1:
        raise ShapeError("rollout needs n >= 1")
    history = np.asarray(seed.data if isinstance(seed, Tensor) else seed)
    if history.ndim < 4 or history.shape[-4] < 1:
        raise ShapeError("rollout needs at least one seed frame")
    preds = []
    with ad.no_grad():
        for _ in range(n):
            t = history.shape[-4]
            if trace is not None:
                trace.append(window_indices(t, model.delta))
            y = predict_next(model, pad_window(history, t, model.delta)).data
            preds.append(y)
            history = np.concatenate([history, np.expand_dims(y, -4)], axis=-4)
    return np.stack(preds, axis=-4)


def neutralize_streams(model: PredictorModel) -> None:
    """Zero the context projection and make every generated filter the identity kernel.

    Afterwards the bottleneck passes Z through unchanged, so the model computes
    exactly what :func:`plain_forward` computes.
    """
    if model.gcpn is not None:
        model.gcpn.w_o.data = np.zeros_like(model.gcpn.w_o.data)
    if model.filter_gen is not None:
        gen = model.filter_gen
        gen.weights.data = np.zeros_like(gen.weights.data)
        gen.bias.data = delta_kernel(gen.c_out, gen.c_in, gen.k, gen.depthwise).reshape(-1).astype(gen.bias.data.dtype)
