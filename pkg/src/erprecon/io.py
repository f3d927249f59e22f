"""PFM depth maps and PNG images."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a single-channel little-endian PFM (rows stored bottom-to-top)."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects a 2D array, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM file (either endianness); returns float32 ``(H, W)`` or ``(H, W, 3)``."""
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise ValueError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape)[::-1].copy()


def read_image(path: str | Path) -> np.ndarray:
    """Read an image as uint8 ``(H, W, C)``."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr.copy()


def write_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path, format="PNG")


def to_float_image(img: np.ndarray) -> np.ndarray:
    """Convert to float64 ``(H, W, C)`` in [0, 1] (uint8 inputs are scaled)."""
    arr = np.asarray(img)
    out = arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)
    if out.ndim == 2:
        out = out[..., None]
    return out
