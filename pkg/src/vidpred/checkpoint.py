"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    b"NFCK"  u32 version
    u32 n_params, then n_params blobs
    optimizer: u64 step, f64 lr_max, f64 lr_min, u32 total_epochs,
               u32 n_moments, then n_moments blobs named "m/<param>" / "v/<param>"
    u32 epoch
    u32 len, RNG state as canonical JSON
    u32 len, config snapshot text
    u32 n_rows, then per row: u32 epoch, f64 lr, f64 train_loss, f64 val_psnr, f64 val_ssim

    blob := u16 name_len, name (utf-8), u8 dtype tag, u32 ndim, u64 dims...,
            u64 nbytes, raw data
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FrameIOError

MAGIC = b"NFCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(FrameIOError):
    """A checkpoint file is malformed, truncated or of an unknown version."""


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr_max: float = 2e-4
    lr_min: float = 0.0
    total_epochs: int = 30

    def copy(self) -> OptimState:
        return OptimState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            total_epochs=self.total_epochs,
        )


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optim: OptimState
    epoch: int
    rng_state: dict
    config: str
    history: list[tuple] = field(default_factory=list)


def _write_blob(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    enc = name.encode()
    out.write(struct.pack("<H", len(enc)) + enc)
    out.write(struct.pack("<BI", tag, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.write(struct.pack("<Q", len(raw)) + raw)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def text(self) -> str:
        return self.take(self.unpack("<I")).decode()

    def blob(self) -> tuple[str, np.ndarray]:
        name = self.take(self.unpack("<H")).decode()
        tag, ndim = self.unpack("<BI")
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}Q", self.take(8 * ndim)) if ndim else ()
        nbytes = self.unpack("<Q")
        dt = _DTYPES[tag]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{name}: payload size {nbytes} does not match shape {shape}")
        arr = np.frombuffer(self.take(nbytes), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="), copy=True)


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    out.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _write_blob(out, name, arr)
    o = ckpt.optim
    out.write(struct.pack("<QddI", o.step, o.lr_max, o.lr_min, o.total_epochs))
    moments = [(f"m/{k}", a) for k, a in o.m.items()] + [(f"v/{k}", a) for k, a in o.v.items()]
    out.write(struct.pack("<I", len(moments)))
    for name, arr in moments:
        _write_blob(out, name, arr)
    out.write(struct.pack("<I", ckpt.epoch))
    for text in (json.dumps(ckpt.rng_state, sort_keys=True), ckpt.config):
        enc = text.encode()
        out.write(struct.pack("<I", len(enc)) + enc)
    out.write(struct.pack("<I", len(ckpt.history)))
    for row in ckpt.history:
        out.write(struct.pack("<Idddd", int(row[0]), *map(float, row[1:])))
    return out.getvalue()


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = dict(r.blob() for _ in range(r.unpack("<I")))
    step, lr_max, lr_min, total = r.unpack("<QddI")
    optim = OptimState(step=step, lr_max=lr_max, lr_min=lr_min, total_epochs=total)
    for _ in range(r.unpack("<I")):
        name, arr = r.blob()
        kind, _, pname = name.partition("/")
        if kind not in ("m", "v"):
            raise CheckpointError(f"unexpected optimizer entry {name}")
        getattr(optim, kind)[pname] = arr
    epoch = r.unpack("<I")
    rng_state = json.loads(r.text())
    config = r.text()
    history = [r.unpack("<Idddd") for _ in range(r.unpack("<I"))]
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(params, optim, epoch, rng_state, config, [tuple(h) for h in history])


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    try:
        Path(path).write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from None


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return from_bytes(buf)
