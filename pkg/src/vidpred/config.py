"""Run configuration: four dataclass sections with a canonical ``key = value`` text form.

Parsing rejects unknown sections and keys, and serialising a parsed config
reproduces the same text, so parse -> serialise -> parse is a fixed point.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    delta: int = 4
    features: int = 16
    memory_items: int = 8
    kernel_size: int = 3
    gcpn_steps: int = 2
    use_gcpn: bool = True
    use_lfmn: bool = True
    skip_connections: bool = True
    depthwise_filters: bool = False
    max_positions: int = 1024
    filter_weight_std: float = 0.01
    gcpn_out_std: float = 0.1
    dtype: str = "float64"

    @property
    def lfmn_active(self) -> bool:
        # an empty memory has nothing to address, so the stream is off
        return self.use_lfmn and self.memory_items > 0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    lr_min: float = 0.0
    lambda_g: float = 0.01
    seed: int = 0


@dataclass
class DataConfig:
    """Moving-shapes scene parameters plus dataset sizing."""

    height: int = 16
    width: int = 16
    channels: int = 1
    shapes: int = 2
    kinds: tuple[str, ...] = ("square", "circle")
    size_min: int = 3
    size_max: int = 5
    speed_max: int = 1
    background: float = 0.1
    intensity_min: float = 0.5
    intensity_max: float = 0.9
    bounce: bool = True
    seed: int = 0
    sequences: int = 64
    length: int = 20
    val_sequences: int = 16


@dataclass
class EvalConfig:
    rollout_steps: int = 15
    psnr_cap: float = 100.0
    ssim_window: int = 8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> RunConfig:
        m, t, d = self.model, self.training, self.data
        if m.delta < 1:
            raise ConfigError("model.delta must be >= 1")
        if m.features < 2 or m.features % 2:
            raise ConfigError("model.features must be an even number >= 2")
        if m.kernel_size < 1 or m.kernel_size % 2 == 0:
            raise ConfigError("model.kernel_size must be odd")
        if m.memory_items < 0:
            raise ConfigError("model.memory_items must be >= 0")
        if m.gcpn_steps < 1:
            raise ConfigError("model.gcpn_steps must be >= 1")
        if m.dtype not in ("float64", "float32"):
            raise ConfigError("model.dtype must be float64 or float32")
        if t.lambda_g < 0:
            raise ConfigError("training.lambda_g must be >= 0")
        if t.batch_size < 1 or t.epochs < 0:
            raise ConfigError("training.batch_size must be >= 1 and epochs >= 0")
        if d.height % 4 or d.width % 4:
            raise ConfigError("data.height and data.width must be divisible by 4")
        if d.size_min < 1 or d.size_max < d.size_min:
            raise ConfigError("data.size_min/size_max out of order")
        if d.size_max > min(d.height, d.width):
            raise ConfigError("shapes larger than the canvas")
        if not 0 <= d.speed_max < min(d.height, d.width) / 2:
            raise ConfigError("data.speed_max must stay below half the canvas per frame")
        if not set(d.kinds) <= {"square", "circle"} or not d.kinds:
            raise ConfigError(f"unknown shape kinds {d.kinds}")
        if not 0.0 <= d.background <= 1.0 or not 0.0 <= d.intensity_min <= d.intensity_max <= 1.0:
            raise ConfigError("data intensities must lie in [0, 1] with intensity_min <= intensity_max")
        if d.length < 2:
            raise ConfigError("data.length must be >= 2")
        return self


_SECTIONS = ("model", "training", "data", "eval")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if typing.get_origin(typ) is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def to_text(cfg: RunConfig) -> str:
    lines = []
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(cfg, name)
        hints = typing.get_type_hints(type(section))
        known = {f.name for f in dataclasses.fields(section)}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            setattr(section, key, _coerce(raw, hints[key], f"{name}.{key}"))
    return cfg.validate()


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_text(text)


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Copy ``cfg`` with per-section overrides, e.g. ``replace(cfg, model={"use_gcpn": False})``."""
    parts = {name: getattr(cfg, name) for name in _SECTIONS}
    for name, changes in sections.items():
        parts[name] = dataclasses.replace(parts[name], **changes)
    return RunConfig(**parts).validate()
