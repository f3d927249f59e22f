"""TSDF fusion of radial ERP depth maps into a dense voxel grid, and mesh
extraction with marching cubes.

The signed distance of a voxel is measured along its viewing ray: ``d - r``
where ``r`` is the voxel's distance to the camera center and ``d`` the
observed radial depth in the pixel the voxel projects to. Positive values
lie in front of the surface (free space).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates
from skimage.measure import marching_cubes

from .camera import ErpIntrinsics, Pose, cartesian_to_spherical, project
from .mesh import TriangleMesh, export_ply, read_ply  # noqa: F401  (re-exported)
from .sweep import DepthMap

CHUNK_VOXELS = 1 << 18
DEFAULT_MAX_WEIGHT = 128.0


@dataclass
class TsdfGrid:
    """Dense TSDF volume. Voxel ``(i, j, k)`` is centered at ``origin + voxel_size * (i, j, k)``.

    ``tsdf`` is normalized by the truncation distance and lies in ``[-1, 1]``;
    untouched voxels have weight 0 and tsdf 1. Arrays are indexed
    ``[i, j, k]`` (x, y, z) in C order.
    """

    origin: np.ndarray
    voxel_size: float
    tsdf: np.ndarray        # (nx, ny, nz) float64
    weight: np.ndarray      # (nx, ny, nz) float64
    color: np.ndarray       # (nx, ny, nz, 3) float32, running mean in [0, 255]

    @classmethod
    def empty(cls, origin, voxel_size: float, dims: tuple[int, int, int]) -> "TsdfGrid":
        if voxel_size <= 0:
            raise ValueError(f"voxel size must be positive, got {voxel_size}")
        dims = tuple(int(n) for n in dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"grid needs at least 2 voxels per axis, got {dims}")
        return cls(np.asarray(origin, dtype=np.float64).reshape(3), float(voxel_size),
                   np.ones(dims), np.zeros(dims), np.zeros(dims + (3,), dtype=np.float32))

    @classmethod
    def covering(cls, lo, hi, voxel_size: float, margin: int = 1) -> "TsdfGrid":
        """Smallest grid whose voxel centers span the box ``[lo, hi]`` plus ``margin`` voxels."""
        lo = np.asarray(lo, dtype=np.float64) - margin * voxel_size
        hi = np.asarray(hi, dtype=np.float64) + margin * voxel_size
        dims = np.ceil((hi - lo) / voxel_size - 1e-9).astype(int) + 1
        return cls.empty(lo, voxel_size, tuple(dims))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.tsdf.shape

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    def voxel_centers(self, flat_index: np.ndarray) -> np.ndarray:
        idx = np.stack(np.unravel_index(flat_index, self.dims), axis=-1)
        return self.origin + self.voxel_size * idx

    def copy(self) -> "TsdfGrid":
        return TsdfGrid(self.origin.copy(), self.voxel_size, self.tsdf.copy(),
                        self.weight.copy(), self.color.copy())


def _check_frame(depth: DepthMap, color: np.ndarray, intr: ErpIntrinsics) -> np.ndarray:
    if depth.shape != intr.shape:
        raise ValueError(f"depth {depth.shape} does not match intrinsics {intr.shape}")
    color = np.asarray(color)
    if color.ndim == 2:
        color = np.repeat(color[..., None], 3, axis=2)
    if color.shape != intr.shape + (3,):
        raise ValueError(f"color {color.shape} does not match intrinsics {intr.shape}")
    return color.astype(np.float32)


def _integrate_chunk(grid: TsdfGrid, start: int, stop: int, depth: DepthMap, color: np.ndarray,
                     pose: Pose, intr: ErpIntrinsics, trunc: float, max_weight: float) -> None:
    flat = np.arange(start, stop)
    cam = pose.apply(grid.voxel_centers(flat))
    r = np.sqrt(cam[:, 0] * cam[:, 0] + cam[:, 1] * cam[:, 1] + cam[:, 2] * cam[:, 2])
    inside = r > 0
    if not np.all(inside):
        cam = np.where(inside[:, None], cam, np.array([0.0, 0.0, 1.0]))
    s, _ = cartesian_to_spherical(cam)
    u, v = project(s, intr)
    col = np.mod(np.floor(u + 0.5).astype(np.int64), intr.width)
    row = np.clip(np.floor(v + 0.5).astype(np.int64), 0, intr.height - 1)
    ok = inside & depth.valid[row, col]
    sdf = np.where(ok, depth.depth[row, col] - r, -np.inf)
    ok &= sdf > -trunc
    if not np.any(ok):
        return
    sel = flat[ok]
    sample = np.clip(sdf[ok] / trunc, -1.0, 1.0)
    tsdf = grid.tsdf.reshape(-1)
    weight = grid.weight.reshape(-1)
    rgb = grid.color.reshape(-1, 3)
    w = weight[sel]
    tsdf[sel] = (tsdf[sel] * w + sample) / (w + 1.0)
    rgb[sel] = ((rgb[sel] * w[:, None] + color[row[ok], col[ok]]) / (w[:, None] + 1.0)).astype(np.float32)
    weight[sel] = np.minimum(w + 1.0, max_weight)


def integrate_frame(grid: TsdfGrid, depth: DepthMap, color: np.ndarray, pose: Pose,
                    intr: ErpIntrinsics, trunc: float, max_weight: float = DEFAULT_MAX_WEIGHT,
                    threads: int = 1) -> TsdfGrid:
    """Fuse one radial depth map (and its color image) into ``grid`` in place.

    Each voxel center is moved into the camera frame and projected; the
    nearest pixel's depth gives ``sdf = d - r``. Voxels with a valid depth and
    ``sdf > -trunc`` take a weight-1 sample ``clip(sdf / trunc, -1, 1)`` into
    their running mean; weights saturate at ``max_weight``. Voxels are
    processed in fixed-size chunks so the result does not depend on
    ``threads``.

    Returns:
        The same ``grid`` object, for chaining.
    """
    if trunc <= 0:
        raise ValueError(f"truncation must be positive, got {trunc}")
    color = _check_frame(depth, color, intr)
    total = grid.tsdf.size
    bounds = [(a, min(a + CHUNK_VOXELS, total)) for a in range(0, total, CHUNK_VOXELS)]

    def work(b: tuple[int, int]) -> None:
        _integrate_chunk(grid, b[0], b[1], depth, color, pose, intr, trunc, max_weight)

    if threads <= 1:
        for b in bounds:
            work(b)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, bounds))
    return grid


def _cell_valid(observed: np.ndarray) -> np.ndarray:
    """True for cells (between voxel centers) whose 8 corners are all observed."""
    o = observed
    return (o[:-1, :-1, :-1] & o[1:, :-1, :-1] & o[:-1, 1:, :-1] & o[:-1, :-1, 1:]
            & o[1:, 1:, :-1] & o[1:, :-1, 1:] & o[:-1, 1:, 1:] & o[1:, 1:, 1:])


def extract_mesh(grid: TsdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Marching cubes (Lorensen) over cells whose eight corners are all observed.

    Triangle normals (right-hand rule) point toward increasing TSDF, i.e.
    out of the surface toward the observing cameras. Vertex colors are
    trilinearly interpolated from the color accumulators. Grids with no
    observed sign change give an empty mesh.
    """
    observed = grid.observed
    if not np.any(observed):
        return TriangleMesh()
    # unobserved voxels take the iso value plus one so they never flip a cell
    # on their own; such cells are dropped below anyway
    volume = np.where(observed, grid.tsdf, iso + 1.0)
    vals = volume[observed]
    if vals.min() >= iso or vals.max() < iso:
        return TriangleMesh()
    try:
        verts, faces, _, _ = marching_cubes(volume, level=iso, method="lorensen",
                                            allow_degenerate=False)
    except (RuntimeError, ValueError):
        return TriangleMesh()
    cells = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
    cells = np.minimum(cells, np.array(grid.dims) - 2)
    keep = _cell_valid(observed)[cells[:, 0], cells[:, 1], cells[:, 2]]
    faces = faces[keep]
    if len(faces) == 0:
        return TriangleMesh()
    used, faces = np.unique(faces, return_inverse=True)
    faces = faces.reshape(-1, 3)
    verts = verts[used].astype(np.float64)
    colors = np.stack([map_coordinates(grid.color[..., c], verts.T, order=1, mode="nearest")
                       for c in range(3)], axis=1)
    colors = np.clip(np.round(colors), 0, 255).astype(np.uint8)
    return TriangleMesh(grid.origin + grid.voxel_size * verts, faces, colors)


# --- snapshot files ------------------------------------------------------

def save_grid(path: str | Path, grid: TsdfGrid) -> None:
    """Write a grid snapshot: text header, then float32 tsdf, float32 weight, uint8 rgb."""
    nx, ny, nz = grid.dims
    ox, oy, oz = (repr(float(c)) for c in grid.origin)
    header = f"TSDF {nx} {ny} {nz} {grid.voxel_size!r} {ox} {oy} {oz}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(grid.tsdf.astype("<f4").tobytes())
        fh.write(grid.weight.astype("<f4").tobytes())
        fh.write(np.clip(np.round(grid.color), 0, 255).astype(np.uint8).tobytes())


def load_grid(path: str | Path) -> TsdfGrid:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    parts = raw[:nl].decode("ascii", errors="replace").split() if nl > 0 else []
    if len(parts) != 8 or parts[0] != "TSDF":
        raise ValueError(f"{path}: not a TSDF snapshot")
    dims = tuple(int(p) for p in parts[1:4])
    voxel_size = float(parts[4])
    origin = np.array([float(p) for p in parts[5:8]])
    n = dims[0] * dims[1] * dims[2]
    body = raw[nl + 1:]
    if len(body) != n * 11:
        raise ValueError(f"{path}: expected {n * 11} data bytes, found {len(body)}")
    tsdf = np.frombuffer(body, "<f4", n, 0).astype(np.float64).reshape(dims)
    weight = np.frombuffer(body, "<f4", n, 4 * n).astype(np.float64).reshape(dims)
    color = np.frombuffer(body, np.uint8, 3 * n, 8 * n).astype(np.float32).reshape(dims + (3,))
    return TsdfGrid(origin, voxel_size, tsdf, weight, color)
