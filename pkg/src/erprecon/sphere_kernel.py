"""Latitude-adaptive convolution sampling on ERP images.

Each kernel tap is placed on the plane tangent to the sphere at the output
pixel and mapped back to the sphere with the inverse gnomonic projection.
Taps are indexed ``(i, j)`` with ``i`` pointing east (+longitude) and ``j``
pointing north (+latitude); kernels store them in image raster order, top
row first.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import TWO_PI, ErpIntrinsics


@dataclass(frozen=True)
class KernelPattern:
    delta_theta: float
    delta_phi: float
    size: int = 3

    def __post_init__(self) -> None:
        if not 0.0 < self.delta_theta < np.pi / 2 or not 0.0 < self.delta_phi < np.pi / 2:
            raise ValueError("kernel angular steps must lie in (0, pi/2)")
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.size}")

    @classmethod
    def for_intrinsics(cls, intr: ErpIntrinsics, size: int = 3) -> "KernelPattern":
        """Steps equal to the pixel pitch: 2*pi/W in longitude, pi/H in latitude."""
        return cls(TWO_PI / intr.width, np.pi / intr.height, size)

    @property
    def taps(self) -> int:
        return self.size * self.size


def tap_indices(size: int) -> list[tuple[int, int]]:
    """Tap ``(i, j)`` pairs in raster order (north row first, west to east)."""
    h = size // 2
    return [(i, j) for j in range(h, -h - 1, -1) for i in range(-h, h + 1)]


def tangent_pattern(k: KernelPattern) -> np.ndarray:
    """Tangent-plane tap positions, shape ``(size*size, 2)`` as (east, north).

    ``x_(i,j) = (tan(i*dtheta), sec(i*dtheta) * tan(j*dphi))``; for a 3x3
    kernel this is the SphereNet pattern.
    """
    out = np.empty((k.taps, 2))
    for t, (i, j) in enumerate(tap_indices(k.size)):
        a = i * k.delta_theta
        out[t, 0] = np.tan(a)
        out[t, 1] = np.tan(j * k.delta_phi) / np.cos(a)
    return out


def inverse_gnomonic(x, y, theta0, phi0) -> tuple[np.ndarray, np.ndarray]:
    """Map tangent-plane points at (theta0, phi0) back to sphere (theta, phi)."""
    x, y, theta0, phi0 = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64)
                                               for a in (x, y, theta0, phi0)))
    rho = np.hypot(x, y)
    c = np.arctan(rho)
    sin_c, cos_c = np.sin(c), np.cos(c)
    center = rho == 0.0
    safe_rho = np.where(center, 1.0, rho)
    s = np.clip(cos_c * np.sin(phi0) + y * sin_c * np.cos(phi0) / safe_rho, -1.0, 1.0)
    phi = np.where(center, phi0, np.arcsin(s))
    dtheta = np.arctan2(x * sin_c, rho * np.cos(phi0) * cos_c - y * np.sin(phi0) * sin_c)
    theta = np.where(center, theta0, theta0 + dtheta)
    return theta, phi


@dataclass(frozen=True)
class SampleGrid:
    """Continuous source coordinates per output pixel and tap, each ``(H, W, T)``."""

    u: np.ndarray
    v: np.ndarray
    intr: ErpIntrinsics
    size: int

    @property
    def taps(self) -> int:
        return self.size * self.size


_OFFSET_QUANTUM = float(2 ** 30)


def _wrap_columns(u: np.ndarray, width: int) -> np.ndarray:
    u = np.mod(u, width)
    return np.where(u >= width, u - width, u)


def sample_grid(k: KernelPattern, intr: ErpIntrinsics) -> SampleGrid:
    """Per-pixel tap locations for a spherical kernel.

    Offsets depend only on the row, so they are computed once per row (at
    longitude 0) and shifted by the column index. Column offsets are rounded
    to a multiple of ``2**-30`` pixels so that ``column + offset`` is exact in
    float64, which makes sampling exactly equivariant to column shifts.
    """
    h, w = intr.height, intr.width
    pattern = tangent_pattern(k)
    phi0 = (h / 2.0 - np.arange(h, dtype=np.float64)) * (np.pi / h)
    theta, phi = inverse_gnomonic(pattern[None, :, 0], pattern[None, :, 1], 0.0, phi0[:, None])
    du = np.round(theta * (w / TWO_PI) * _OFFSET_QUANTUM) / _OFFSET_QUANTUM   # (H, T)
    v_row = np.clip(-(h / np.pi) * phi + h / 2.0, 0.0, h - 1.0)
    cols = np.arange(w, dtype=np.float64)
    u = _wrap_columns(cols[None, :, None] + du[:, None, :], w)
    v = np.broadcast_to(v_row[:, None, :], u.shape).copy()
    return SampleGrid(u, v, intr, k.size)


def regular_grid(intr: ErpIntrinsics, size: int = 3) -> SampleGrid:
    """Square-grid neighbors with horizontal wrap and vertical clamp."""
    h, w = intr.height, intr.width
    offsets = tap_indices(size)
    di = np.array([i for i, _ in offsets], dtype=np.float64)
    dj = np.array([-j for _, j in offsets], dtype=np.float64)   # north = up = -row
    rows = np.arange(h, dtype=np.float64)[:, None, None]
    cols = np.arange(w, dtype=np.float64)[None, :, None]
    u = np.broadcast_to(np.mod(cols + di + w, w), (h, w, len(offsets))).copy()
    v = np.broadcast_to(np.clip(rows + dj, 0.0, h - 1.0), (h, w, len(offsets))).copy()
    return SampleGrid(u, v, intr, size)


def bilinear_wrap(data: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup in an ERP-shaped ``(H, W, C)`` array.

    Columns wrap modulo W; rows clamp to ``[0, H-1]``. Returns
    ``u.shape + (C,)``.
    """
    h, w = data.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1.0)
    x0f = np.floor(u)
    y0f = np.floor(v)
    fx = (u - x0f)[..., None]
    fy = (v - y0f)[..., None]
    x0 = np.mod(x0f.astype(np.int64), w)
    x1 = np.mod(x0 + 1, w)
    y0 = y0f.astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def _check_image(img: np.ndarray, grid: SampleGrid) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[:2] != grid.intr.shape:
        raise ValueError(f"image shape {arr.shape[:2]} does not match grid {grid.intr.shape}")
    return arr


def sphere_sample(img: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Gather all taps: ``(H, W, C)`` -> ``(H, W, T*C)`` laid out as (tap, channel)."""
    arr = _check_image(img, grid)
    samples = bilinear_wrap(arr, grid.u, grid.v)            # (H, W, T, C)
    h, w = arr.shape[:2]
    return samples.reshape(h, w, grid.taps * arr.shape[2])


def sphere_conv(img: np.ndarray, weights: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Convolve with weights of shape ``(T, C_in, C_out)`` over the sample grid."""
    arr = _check_image(img, grid)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 3 or weights.shape[0] != grid.taps or weights.shape[1] != arr.shape[2]:
        raise ValueError(f"weights {weights.shape} incompatible with {grid.taps} taps "
                         f"and {arr.shape[2]} input channels")
    samples = bilinear_wrap(arr, grid.u, grid.v)            # (H, W, T, C)
    return np.einsum("hwtc,tco->hwo", samples, weights)


def fused_layer(img: np.ndarray, regular_weights: np.ndarray, sphere_weights: np.ndarray,
                grid: SampleGrid, reg_grid: SampleGrid | None = None) -> np.ndarray:
    """Regular and spherical convolutions applied to the same input, summed."""
    regular_weights = np.asarray(regular_weights, dtype=np.float64)
    sphere_weights = np.asarray(sphere_weights, dtype=np.float64)
    if regular_weights.shape[1:] != sphere_weights.shape[1:]:
        raise ValueError("regular and spherical weights disagree on channel counts")
    if reg_grid is None:
        reg_size = int(round(np.sqrt(regular_weights.shape[0])))
        reg_grid = regular_grid(grid.intr, reg_size)
    return sphere_conv(img, regular_weights, reg_grid) + sphere_conv(img, sphere_weights, grid)


def shift_columns(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate an ERP image by ``k`` columns (a pure yaw)."""
    return np.roll(img, k, axis=1)


# --- kernel weight files -------------------------------------------------

def write_kernel(fh, weights: np.ndarray) -> None:
    """Append one ``SPHK`` record to an open binary file."""
    weights = np.asarray(weights, dtype="<f4")
    taps, cin, cout = weights.shape
    size = int(round(np.sqrt(taps)))
    if size * size != taps:
        raise ValueError(f"tap count {taps} is not a square")
    fh.write(f"SPHK {size} {cin} {cout}\n".encode("ascii"))
    fh.write(weights.tobytes())


def read_kernel(fh) -> np.ndarray | None:
    """Read one ``SPHK`` record; returns None at end of file."""
    line = fh.readline()
    if not line:
        return None
    parts = line.decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != "SPHK":
        raise ValueError(f"bad kernel header: {line!r}")
    size, cin, cout = (int(p) for p in parts[1:])
    if size < 1 or size % 2 == 0 or cin < 1 or cout < 1:
        raise ValueError(f"bad kernel dimensions: {line!r}")
    count = size * size * cin * cout
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated kernel payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(size * size, cin, cout)


def save_kernel(path: str | Path, weights: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_kernel(fh, weights)


def load_kernel(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        weights = read_kernel(fh)
    if weights is None:
        raise ValueError(f"{path}: empty kernel file")
    return weights
