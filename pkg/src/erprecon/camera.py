"""Equirectangular (ERP) camera model.

Conventions:
  - Camera frame: x right, y down, z forward.
  - Longitude theta in [-pi, pi), 0 = forward (+z), positive toward +x.
  - Latitude phi in [-pi/2, pi/2], positive = up (-y).
  - Pixel centers sit at integer coordinates. Column u = 0 is theta = -pi,
    row v = 0 is the north pole, so the continuous domain is [0, W) x [0, H].
  - Poses are world-to-camera: X_cam = R @ X_world + t.

All functions broadcast over numpy arrays and also accept plain floats.
Rigid transforms are written out elementwise (no BLAS) so results do not
depend on array shape or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a camera operation."""


class SphericalCoord(NamedTuple):
    theta: np.ndarray | float
    phi: np.ndarray | float


class PixelCoord(NamedTuple):
    u: np.ndarray | float
    v: np.ndarray | float


@dataclass(frozen=True)
class ErpIntrinsics:
    """Full-sphere ERP image size. ``width`` must be ``2 * height``, both even."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if self.width % 2 or self.height % 2:
            raise DomainError(f"image size must be even, got {self.width}x{self.height}")
        if self.width != 2 * self.height:
            raise DomainError(f"ERP images need width == 2*height, got {self.width}x{self.height}")

    @classmethod
    def from_shape(cls, shape: tuple[int, ...]) -> "ErpIntrinsics":
        """Build from an array shape ``(H, W, ...)``."""
        return cls(width=int(shape[1]), height=int(shape[0]))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def downscaled(self, factor: int) -> "ErpIntrinsics":
        if self.width % factor or self.height % factor:
            raise DomainError(f"{self.width}x{self.height} not divisible by {factor}")
        return ErpIntrinsics(self.width // factor, self.height // factor)

    def matrix(self) -> np.ndarray:
        """The 2x3 matrix mapping (theta, phi, 1) to (u, v)."""
        w, h = self.width, self.height
        return np.array([[w / TWO_PI, 0.0, w / 2.0], [0.0, -h / np.pi, h / 2.0]])


def _as_rotation(rotation) -> np.ndarray:
    r = np.array(rotation, dtype=np.float64).reshape(3, 3)
    r.setflags(write=False)
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform ``X_cam = rotation @ X_world + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rot = _as_rotation(self.rotation)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        trans.setflags(write=False)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise DomainError("pose contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise DomainError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_camera_center(cls, camera_to_world: np.ndarray, center) -> "Pose":
        """Build from a camera-to-world rotation and the camera center in world."""
        r_cw = np.asarray(camera_to_world, dtype=np.float64)
        r = r_cw.T
        return cls(r, -(r @ np.asarray(center, dtype=np.float64)))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -(self.rotation.T @ self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World -> camera for points of shape ``(..., 3)``."""
        return rigid_apply(self.rotation, self.translation, points)

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Camera -> world for points of shape ``(..., 3)``."""
        p = np.asarray(points, dtype=np.float64)
        t = self.translation
        return rigid_apply(self.rotation.T, np.zeros(3), np.stack(
            [p[..., 0] - t[0], p[..., 1] - t[1], p[..., 2] - t[2]], axis=-1))


def rigid_apply(rotation: np.ndarray, translation: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Compute ``rotation @ p + translation`` for every point, elementwise."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r, t = rotation, translation
    out = np.empty(np.broadcast(x, y, z).shape + (3,), dtype=np.float64)
    out[..., 0] = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    out[..., 1] = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    out[..., 2] = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    return out


def wrap_longitude(theta):
    """Wrap longitude into [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=np.float64) + np.pi, TWO_PI) - np.pi


def project(s: SphericalCoord, k: ErpIntrinsics) -> PixelCoord:
    """Map (theta, phi) to continuous pixel coordinates (u, v)."""
    theta, phi = s
    u = (k.width / TWO_PI) * np.asarray(theta, dtype=np.float64) + k.width / 2.0
    v = (-k.height / np.pi) * np.asarray(phi, dtype=np.float64) + k.height / 2.0
    return PixelCoord(u, v)


def unproject(p: PixelCoord, k: ErpIntrinsics) -> SphericalCoord:
    """Map pixel coordinates back to (theta, phi).

    Raises:
        DomainError: if any pixel lies outside ``[0, W) x [0, H]``.
    """
    u = np.asarray(p[0], dtype=np.float64)
    v = np.asarray(p[1], dtype=np.float64)
    if np.any(~(u >= 0.0) | ~(u < k.width)) or np.any(~(v >= 0.0) | ~(v <= k.height)):
        raise DomainError("pixel coordinate outside the ERP image domain")
    theta = (u - k.width / 2.0) * (TWO_PI / k.width)
    phi = (k.height / 2.0 - v) * (np.pi / k.height)
    return SphericalCoord(theta, phi)


def spherical_to_cartesian(s: SphericalCoord, r) -> np.ndarray:
    """Point at distance ``r`` along direction (theta, phi); returns ``(..., 3)``."""
    theta = np.asarray(s[0], dtype=np.float64)
    phi = np.asarray(s[1], dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(~(r > 0.0)):
        raise DomainError("radius must be positive")
    cos_phi = np.cos(phi)
    x = r * cos_phi * np.sin(theta)
    y = -r * np.sin(phi)
    z = r * cos_phi * np.cos(theta)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def cartesian_to_spherical(points: np.ndarray) -> tuple[SphericalCoord, np.ndarray]:
    """Inverse of :func:`spherical_to_cartesian`.

    Returns:
        ``(SphericalCoord(theta, phi), r)``.

    Raises:
        DomainError: for a zero vector.
    """
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    if np.any(~(r > 0.0)):
        raise DomainError("cannot take the direction of a zero vector")
    theta = np.arctan2(x, z)
    # atan2 returns +pi for x == -0.0 or tiny negative z; keep theta < pi
    theta = np.where(theta >= np.pi, -np.pi, theta)
    phi = np.arcsin(np.clip(-y / r, -1.0, 1.0))
    return SphericalCoord(theta, phi), r


def transform_point(p: np.ndarray, src: Pose, dst: Pose) -> np.ndarray:
    """Move points from the ``src`` camera frame to the ``dst`` camera frame."""
    return dst.apply(src.apply_inverse(p))


def pixel_grid(k: ErpIntrinsics) -> PixelCoord:
    """Integer pixel-center coordinates, each of shape ``(H, W)``."""
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64),
                       np.arange(k.width, dtype=np.float64), indexing="ij")
    return PixelCoord(u, v)


def pixel_rays(k: ErpIntrinsics) -> np.ndarray:
    """Unit viewing directions for every pixel center, shape ``(H, W, 3)``."""
    return spherical_to_cartesian(unproject(pixel_grid(k), k), 1.0)


def read_poses(path: str | Path) -> dict[str, Pose]:
    """Read a pose file: ``frame_id r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz``."""
    poses: dict[str, Pose] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 13:
            raise ValueError(f"{path}:{lineno}: expected 13 fields, got {len(parts)}")
        m = np.array([float(x) for x in parts[1:]]).reshape(3, 4)
        poses[parts[0]] = Pose(m[:, :3], m[:, 3])
    return poses


def format_pose(frame_id: str, pose: Pose) -> str:
    m = np.concatenate([pose.rotation, pose.translation[:, None]], axis=1)
    return frame_id + " " + " ".join(repr(float(x)) for x in m.ravel())


def write_poses(path: str | Path, poses: dict[str, Pose]) -> None:
    lines = ["# frame_id r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz (world-to-camera)"]
    lines += [format_pose(fid, pose) for fid, pose in poses.items()]
    Path(path).write_text("\n".join(lines) + "\n")
