"""Image I/O: 8-bit RGB PNG for humans, a headered raw-float container for
lossless fixtures. Pixels map to [0,1] by /255 and back by round-half-up."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor4

__all__ = [
    "load_image",
    "save_image",
    "to_unit",
    "to_bytes_u8",
    "save_raw",
    "load_raw",
    "atomic_write",
]

RAW_MAGIC = b"ERAF"


def to_unit(img_u8: np.ndarray, dtype=np.float64) -> Tensor4:
    """(h, w, 3) uint8 -> (1, 3, h, w) in [0, 1]."""
    arr = img_u8.astype(dtype) / 255.0
    return Tensor4(arr.transpose(2, 0, 1)[None])


def to_bytes_u8(x: Tensor4) -> np.ndarray:
    """(1, 3, h, w) -> (h, w, 3) uint8, round-half-up with clamping."""
    arr = x.data[0].transpose(1, 2, 0)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def load_image(path) -> Tensor4:
    path = Path(path)
    if path.suffix == ".eraf":
        return load_raw(path)
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return to_unit(np.asarray(rgb))


def save_image(x: Tensor4, path) -> None:
    path = Path(path)
    if path.suffix == ".eraf":
        save_raw(x, path)
        return
    img = Image.fromarray(to_bytes_u8(x), mode="RGB")
    atomic_write(path, lambda fh: img.save(fh, format="PNG"))


def save_raw(x: Tensor4, path) -> None:
    """Float32 planes with a minimal header; exact up to single precision."""
    n, c, h, w = x.shape
    if n != 1:
        raise ValueError("raw image files hold a single image")
    payload = RAW_MAGIC + struct.pack("<III", c, h, w) + x.data[0].astype("<f4").tobytes()
    atomic_write(path, lambda fh: fh.write(payload))


def load_raw(path) -> Tensor4:
    blob = Path(path).read_bytes()
    if blob[:4] != RAW_MAGIC or len(blob) < 16:
        raise ValueError(f"{path}: not a raw float image")
    c, h, w = struct.unpack("<III", blob[4:16])
    expect = 16 + 4 * c * h * w
    if len(blob) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(blob)}")
    arr = np.frombuffer(blob[16:], dtype="<f4").reshape(c, h, w).astype(np.float64)
    return Tensor4(arr[None])


def atomic_write(path, writer) -> None:
    """Write via a temp file in the same directory, then rename into place,
    so readers never observe a partial file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
