"""Per-pixel matching features and the per-voxel MLP used for cost reduction.

Two feature paths exist. The classical descriptor is weight-free and is the
default for sweeping. The network path runs a stack of fused
(regular + spherical) convolution blocks with externally supplied weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import ErpIntrinsics
from .io import to_float_image
from .sphere_kernel import (KernelPattern, SampleGrid, bilinear_wrap, fused_layer, read_kernel,
                            regular_grid, sample_grid, tap_indices, write_kernel)

ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class TapSource:
    """Gray image and tap grid from which classical descriptors are rebuilt.

    Keeping these alongside a classical feature map lets the sweep recompute
    a source descriptor at the warped positions of the reference taps, so
    the source patch is read in the reference pixel's own tangent frame.
    """

    gray: np.ndarray        # (H, W)
    grid: SampleGrid
    normalize: bool = True

    def descriptors(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Descriptors from taps at ``(..., T)`` positions ``u, v``."""
        taps = bilinear_wrap(self.gray[..., None], u, v)[..., 0]
        return tap_descriptor(taps, self.grid.size, self.normalize)


@dataclass(frozen=True)
class FeatureMap:
    """Dense descriptors ``data`` of shape ``(H, W, F)`` at ``1/scale`` of the source image.

    Classical maps also carry their :class:`TapSource`; network maps do not.
    """

    data: np.ndarray
    scale: int = 1
    taps: TapSource | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"feature data must be (H, W, F), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def intr(self) -> ErpIntrinsics:
        return ErpIntrinsics.from_shape(self.data.shape)

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def _rows_clamped(a: np.ndarray, offset: int) -> np.ndarray:
    idx = np.clip(np.arange(a.shape[0]) + offset, 0, a.shape[0] - 1)
    return a[idx]


def downsample(img: np.ndarray) -> np.ndarray:
    """Halve an ERP array with a [1, 2, 1] blur and even-index decimation.

    Keeping the even samples keeps pixel centers aligned: column ``2u`` at
    full resolution has the same longitude as column ``u`` after halving.
    """
    a = np.asarray(img, dtype=np.float64)
    a = 0.25 * np.roll(a, 1, axis=1) + 0.5 * a + 0.25 * np.roll(a, -1, axis=1)
    a = 0.25 * _rows_clamped(a, -1) + 0.5 * a + 0.25 * _rows_clamped(a, 1)
    return a[::2, ::2]


def decimate(arr: np.ndarray, factor: int) -> np.ndarray:
    """Keep every ``factor``-th pixel (aligned with :func:`downsample`)."""
    return np.asarray(arr)[::factor, ::factor]


def _check_scale(scale: int) -> int:
    if scale < 1 or scale & (scale - 1):
        raise ValueError(f"feature scale must be a power of two, got {scale}")
    return scale.bit_length() - 1


def to_gray(img: np.ndarray) -> np.ndarray:
    arr = to_float_image(img)
    return arr.mean(axis=2) if arr.shape[2] > 1 else arr[..., 0]


def _seq_sum(a: np.ndarray) -> np.ndarray:
    # fixed left-to-right order over the last axis (see sweep._dot)
    acc = a[..., 0]
    for k in range(1, a.shape[-1]):
        acc = acc + a[..., k]
    return acc


def tap_descriptor(taps: np.ndarray, size: int, normalize: bool = True) -> np.ndarray:
    """Classical descriptor from ``size x size`` tap samples ``(..., T)``.

    Taps are in :func:`tap_indices` order. The intensity is the center tap,
    the gradients are central differences of the east/west and south/north
    neighbors (per pixel step, positive toward east and toward the south
    pole, i.e. growing column and row). The patch is the taps minus their
    mean with the center dropped.
    """
    idx = tap_indices(size)
    center = idx.index((0, 0))
    gx = 0.5 * (taps[..., idx.index((1, 0))] - taps[..., idx.index((-1, 0))])
    gy = 0.5 * (taps[..., idx.index((0, -1))] - taps[..., idx.index((0, 1))])
    patch = taps - (_seq_sum(taps) / taps.shape[-1])[..., None]
    patch = np.delete(patch, center, axis=-1)
    data = np.concatenate([taps[..., center, None], gx[..., None], gy[..., None], patch], axis=-1)
    if normalize:
        norm = np.sqrt(_seq_sum(data * data))[..., None]
        data = data / np.maximum(norm, 1e-12)
    return data


def classical_features(img: np.ndarray, radius: int = 2, scale: int = 1,
                       normalize: bool = True) -> FeatureMap:
    """Weight-free descriptor: intensity, gradients and a mean-centered patch.

    The image is converted to gray and halved ``log2(scale)`` times. The
    ``(2*radius+1)**2`` patch samples sit on the spherical tangent-plane grid
    with one-pixel angular steps, so at the equator they are the plain pixel
    neighborhood and toward the poles they widen in longitude to keep a
    constant angular footprint. After centering, the center sample is
    dropped since it is implied by the rest, giving
    ``F = 3 + (2*radius+1)**2 - 1``. With ``normalize`` each descriptor has
    unit length so dot products act as a correlation score.
    """
    gray = to_gray(img)
    for _ in range(_check_scale(scale)):
        gray = downsample(gray)
    h, w = gray.shape
    if radius < 1 or radius >= min(h, w) / 2:
        raise ValueError(f"descriptor radius {radius} invalid for {w}x{h} features")
    intr = ErpIntrinsics(w, h)
    grid = sample_grid(KernelPattern.for_intrinsics(intr, 2 * radius + 1), intr)
    source = TapSource(gray, grid, normalize)
    return FeatureMap(source.descriptors(grid.u, grid.v), scale, source)


# --- network forward pass ------------------------------------------------

@dataclass(frozen=True)
class FusedBlock:
    regular: np.ndarray     # (T_reg, C_in, C_out)
    sphere: np.ndarray      # (T_sph, C_in, C_out)

    def __post_init__(self) -> None:
        if self.regular.ndim != 3 or self.sphere.ndim != 3:
            raise ValueError("block weights must be (taps, in, out)")
        if self.regular.shape[1:] != self.sphere.shape[1:]:
            raise ValueError(f"block branch shapes differ: {self.regular.shape} vs {self.sphere.shape}")

    @property
    def in_channels(self) -> int:
        return self.regular.shape[1]

    @property
    def out_channels(self) -> int:
        return self.regular.shape[2]


@dataclass(frozen=True)
class Network:
    """Fused blocks; the first ``log2(stride)`` blocks are followed by stride-2 pooling."""

    blocks: list[FusedBlock]
    stride: int = 1

    def __post_init__(self) -> None:
        if not self.blocks:
            raise ValueError("network has no blocks")
        n_pool = _check_scale(self.stride)
        if n_pool > len(self.blocks):
            raise ValueError(f"stride {self.stride} needs at least {n_pool} blocks")
        for a, b in zip(self.blocks, self.blocks[1:]):
            if a.out_channels != b.in_channels:
                raise ValueError("block channel counts do not chain")


def max_pool(x: np.ndarray) -> np.ndarray:
    """3x3 max pool at even pixels (stride 2), columns wrap, rows clamp."""
    m = np.maximum(np.maximum(np.roll(x, 1, axis=1), x), np.roll(x, -1, axis=1))
    m = np.maximum(np.maximum(_rows_clamped(m, -1), m), _rows_clamped(m, 1))
    return m[::2, ::2]


def network_features(img: np.ndarray, net: Network) -> FeatureMap:
    """Forward pass: fused layer, rectifier, then pooling for the first blocks."""
    x = to_float_image(img)
    h, w = x.shape[:2]
    if h % (2 * net.stride) or w % (2 * net.stride):
        raise ValueError(f"image {w}x{h} not divisible by stride {net.stride} (with even result)")
    if x.shape[2] != net.blocks[0].in_channels:
        raise ValueError(f"image has {x.shape[2]} channels, network expects {net.blocks[0].in_channels}")
    n_pool = _check_scale(net.stride)
    for b, block in enumerate(net.blocks):
        intr = ErpIntrinsics.from_shape(x.shape)
        sph_size = int(round(np.sqrt(block.sphere.shape[0])))
        reg_size = int(round(np.sqrt(block.regular.shape[0])))
        grid = sample_grid(KernelPattern.for_intrinsics(intr, sph_size), intr)
        x = fused_layer(x, block.regular, block.sphere, grid, regular_grid(intr, reg_size))
        x = np.maximum(x, 0.0)
        if b < n_pool:
            x = max_pool(x)
    return FeatureMap(x, net.stride)


def save_network(path: str | Path, net: Network) -> None:
    with open(path, "wb") as fh:
        fh.write(f"SNET {len(net.blocks)} {net.stride}\n".encode("ascii"))
        for block in net.blocks:
            write_kernel(fh, block.regular)
            write_kernel(fh, block.sphere)


def load_network(path: str | Path) -> Network:
    """Read ``SNET <n_blocks> <stride>`` followed by (regular, spherical) SPHK pairs."""
    with open(path, "rb") as fh:
        parts = fh.readline().decode("ascii", errors="replace").split()
        if len(parts) != 3 or parts[0] != "SNET":
            raise ValueError(f"{path}: missing SNET header")
        n_blocks, stride = int(parts[1]), int(parts[2])
        blocks = []
        for _ in range(n_blocks):
            reg, sph = read_kernel(fh), read_kernel(fh)
            if reg is None or sph is None:
                raise ValueError(f"{path}: expected {n_blocks} blocks")
            blocks.append(FusedBlock(reg, sph))
        if fh.read(1):
            raise ValueError(f"{path}: trailing data after {n_blocks} blocks")
    return Network(blocks, stride)


# --- MLP -----------------------------------------------------------------

@dataclass(frozen=True)
class MlpLayer:
    weight: np.ndarray      # (out, in)
    bias: np.ndarray        # (out,)
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad layer shapes {self.weight.shape}, {self.bias.shape}")


@dataclass(frozen=True)
class MlpWeights:
    layers: list[MlpLayer] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("MLP has no layers")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ValueError("MLP layer dimensions do not chain")
        if self.layers[-1].weight.shape[0] != 1:
            raise ValueError("final MLP layer must have one output")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]


def mlp_forward(vector: np.ndarray, weights: MlpWeights) -> np.ndarray:
    """Raw score for cost vectors of shape ``(..., C)``; returns shape ``(...)``."""
    h = np.asarray(vector, dtype=np.float64)
    if h.shape[-1] != weights.in_dim:
        raise ValueError(f"cost vector length {h.shape[-1]} != MLP input {weights.in_dim}")
    for layer in weights.layers:
        h = np.einsum("...i,oi->...o", h, layer.weight) + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h[..., 0]


def save_mlp(path: str | Path, weights: MlpWeights) -> None:
    with open(path, "wb") as fh:
        fh.write(f"SMLP {len(weights.layers)}\n".encode("ascii"))
        for layer in weights.layers:
            rows, cols = layer.weight.shape
            fh.write(f"{rows} {cols} {layer.activation}\n".encode("ascii"))
            fh.write(np.asarray(layer.weight, dtype="<f4").tobytes())
            fh.write(np.asarray(layer.bias, dtype="<f4").tobytes())


def load_mlp(path: str | Path) -> MlpWeights:
    with open(path, "rb") as fh:
        parts = fh.readline().decode("ascii", errors="replace").split()
        if len(parts) != 2 or parts[0] != "SMLP":
            raise ValueError(f"{path}: missing SMLP header")
        layers = []
        for _ in range(int(parts[1])):
            spec = fh.readline().decode("ascii", errors="replace").split()
            if len(spec) != 3:
                raise ValueError(f"{path}: bad layer header {spec}")
            rows, cols, act = int(spec[0]), int(spec[1]), spec[2]
            n = rows * cols + rows
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise ValueError(f"{path}: truncated layer payload")
            values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            layers.append(MlpLayer(values[:rows * cols].reshape(rows, cols), values[rows * cols:], act))
    return MlpWeights(layers)
