"""Binary 8-bit portable graymap (P5) and pixmap (P6) files, and frame directories of them."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FrameIOError

FRAME_PATTERN = re.compile(r"^frame_(\d{5})\.p[gp]m$")


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FrameIOError("malformed header: ran out of data")
        out.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not buf[i : i + 1].isspace():
        raise FrameIOError("malformed header: missing separator before raster")
    return out, i + 1


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Return (uint8 array, maxval); graymaps are (H, W), pixmaps (H, W, 3)."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FrameIOError(f"malformed header: unsupported magic {magic!r}")
    try:
        toks, offset = _tokens(buf[2:], 3)
        width, height, maxval = (int(t) for t in toks)
    except ValueError:
        raise FrameIOError("malformed header: non-integer field") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FrameIOError(f"malformed header: {width}x{height} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = buf[2 + offset : 2 + offset + need]
    if len(raster) < need:
        raise FrameIOError(f"truncated payload: expected {need} bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape((height, width, channels) if channels == 3 else (height, width))
    return arr.copy(), maxval


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FrameIOError(f"pixmaps hold uint8 samples, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise FrameIOError(f"cannot store array of shape {arr.shape} as a pixmap")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_pnm(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FrameIOError(f"cannot read {path}: {exc}") from None
    try:
        arr, maxval = decode_pnm(buf)
    except FrameIOError as exc:
        raise FrameIOError(f"{path}: {exc}") from None
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return arr


def write_pnm(path: str | Path, arr: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode_pnm(arr))
    except OSError as exc:
        raise FrameIOError(f"cannot write {path}: {exc}") from None


def to_uint8(frames: np.ndarray) -> np.ndarray:
    """[-1, 1] frames to 8-bit samples."""
    raw = (np.clip(frames, -1.0, 1.0) + 1.0) / 2.0
    return np.round(raw * 255.0).astype(np.uint8)


def save_frames(directory: str | Path, frames: np.ndarray) -> list[Path]:
    """Write (T, H, W, C) frames in [-1, 1] as ``frame_%05d.pgm`` (C=1) or ``.ppm`` (C=3)."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FrameIOError(f"cannot create {directory}: {exc}") from None
    ext = "pgm" if frames.shape[-1] == 1 else "ppm"
    paths = []
    for i, frame in enumerate(to_uint8(frames)):
        p = directory / f"frame_{i:05d}.{ext}"
        write_pnm(p, frame)
        paths.append(p)
    return paths


def frame_paths(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameIOError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if FRAME_PATTERN.match(p.name))


def load_frames(directory: str | Path) -> np.ndarray:
    """Read every ``frame_%05d`` pixmap in ``directory`` (sorted) as (T, H, W, C) in [-1, 1]."""
    paths = frame_paths(directory)
    if not paths:
        raise FrameIOError(f"no frame_%05d pixmaps in {directory}")
    frames = []
    for p in paths:
        a = read_pnm(p)
        frames.append(a[:, :, None] if a.ndim == 2 else a)
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FrameIOError(f"inconsistent frame shapes in {directory}: {sorted(shapes)}")
    return np.stack(frames).astype(np.float64) / 255.0 * 2.0 - 1.0
