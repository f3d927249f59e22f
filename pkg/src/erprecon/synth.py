"""Deterministic ERP ray-cast renderer for ground-truth scenes.

Scenes are built from axis-aligned boxes, spheres and inward-facing rooms
with procedural albedo textures. No lighting, no antialiasing: every pixel
holds the texture at the exact ray hit and the exact radial hit distance.

Scene file format (one item per line, ``#`` starts a comment)::

    resolution <W> <H>
    room   <cx> <cy> <cz> <sx> <sy> <sz> <texture...>
    box    <cx> <cy> <cz> <sx> <sy> <sz> <texture...>
    sphere <cx> <cy> <cz> <radius> [inward] <texture...>
    camera <x> <y> <z> [<yaw> <pitch> <roll>]      # degrees

Textures::

    solid <r> <g> <b>
    checker <scale> [<jitter> [<octaves> [<seed>]]]
    gradient <scale> [<r> <g> <b> <r> <g> <b>]

World axes follow the camera convention (x right, y down, z forward), so a
camera with zero angles is upright. Camera angles build the camera-to-world
rotation ``Ry(yaw) @ Rx(pitch) @ Rz(roll)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import ErpIntrinsics, Pose, pixel_rays, rigid_apply
from .mesh import TriangleMesh
from .sweep import DepthMap

EPS = 1e-9


class SceneError(ValueError):
    pass


# --- textures ------------------------------------------------------------

def _hash01(cells: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic per-cell value in [0, 1) from integer cell coords ``(N, 3)``."""
    c = cells.astype(np.int64).astype(np.uint64)
    x = (c[:, 0] * np.uint64(0x9E3779B97F4A7C15)) ^ (c[:, 1] * np.uint64(0xC2B2AE3D27D4EB4F)) \
        ^ (c[:, 2] * np.uint64(0x165667B19E3779F9)) ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass(frozen=True)
class Texture:
    kind: str = "solid"
    scale: float = 0.1
    color_a: tuple[float, float, float] = (0.8, 0.8, 0.8)
    color_b: tuple[float, float, float] = (0.2, 0.2, 0.2)
    jitter: float = 0.0
    octaves: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("solid", "checker", "gradient"):
            raise SceneError(f"unknown texture {self.kind!r}")
        if self.scale <= 0 or self.octaves < 1:
            raise SceneError("texture scale and octaves must be positive")

    def evaluate(self, points: np.ndarray, face_axis: np.ndarray) -> np.ndarray:
        """Albedo ``(N, 3)`` at hit points; ``face_axis`` is the box face normal axis or -1."""
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        n = len(points)
        if self.kind == "solid":
            return np.broadcast_to(a, (n, 3)).copy()
        if self.kind == "gradient":
            direction = np.array([1.0, 0.7, 0.4]) / np.linalg.norm([1.0, 0.7, 0.4])
            s = points @ direction
            t = 0.5 + 0.5 * np.sin(2.0 * np.pi * s / self.scale)
            return a + (b - a) * t[:, None]
        # checker: drop the coordinate along a box face normal so cells never
        # straddle the face plane
        p = points.copy()
        on_face = face_axis >= 0
        p[on_face, face_axis[on_face]] = 0.0
        out = np.zeros((n, 3))
        for octave in range(self.octaves):
            cells = np.floor(p / (self.scale / 2 ** octave)).astype(np.int64)
            parity = np.mod(cells.sum(axis=1), 2)[:, None]
            base = np.where(parity == 0, a, b)
            if self.jitter:
                base = base + self.jitter * (_hash01(cells, self.seed * 7919 + octave) - 0.5)[:, None]
            out += base
        return np.clip(out / self.octaves, 0.0, 1.0)


# --- primitives ----------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box; ``inward`` makes it a room seen from inside."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    texture: Texture = field(default_factory=Texture)
    inward: bool = False

    def __post_init__(self) -> None:
        if min(self.size) <= 0:
            raise SceneError("box sizes must be positive")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = np.asarray(self.center, dtype=np.float64), np.asarray(self.size, dtype=np.float64)
        return c - s / 2, c + s / 2

    def contains(self, p: np.ndarray) -> bool:
        lo, hi = self.bounds
        return bool(np.all(p > lo) and np.all(p < hi))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hit distance (inf for a miss) and face normal axis per ray."""
        lo, hi = self.bounds
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        t_near = np.minimum(t1, t2)
        t_far = np.maximum(t1, t2)
        near = t_near.max(axis=1)
        far = t_far.min(axis=1)
        hit = near <= far
        if self.inward:
            t = np.where(hit & (far > EPS), far, np.inf)
            axis = np.argmin(t_far, axis=1)
        else:
            t = np.where(hit & (near > EPS), near, np.inf)
            axis = np.argmax(t_near, axis=1)
        return t, axis

    def mesh(self) -> TriangleMesh:
        lo, hi = self.bounds
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                            for z in (lo[2], hi[2])])
        # index = 4*ix + 2*iy + iz; faces wound with outward normals
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        tris = []
        for a, b, c, d in quads:
            tris += [(a, b, c), (a, c, d)]
        tris = np.array(tris)
        if self.inward:
            tris = tris[:, ::-1]
        return TriangleMesh(corners, tris, _vertex_colors(self.texture, corners, -np.ones(8, int)))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture = field(default_factory=Texture)
    inward: bool = False
    subdivisions: int = 4

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise SceneError("sphere radius must be positive")

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.linalg.norm(p - np.asarray(self.center)) < self.radius)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        oc = origin - np.asarray(self.center, dtype=np.float64)
        b = dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > EPS, t0, np.where(t1 > EPS, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        return t, -np.ones(len(dirs), dtype=np.int64)

    def mesh(self) -> TriangleMesh:
        verts, tris = icosphere(self.subdivisions)
        verts = verts * self.radius + np.asarray(self.center, dtype=np.float64)
        if self.inward:
            tris = tris[:, ::-1]
        return TriangleMesh(verts, tris, _vertex_colors(self.texture, verts, -np.ones(len(verts), int)))


def _vertex_colors(texture: Texture, points: np.ndarray, axis: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(texture.evaluate(points, axis) * 255), 0, 255).astype(np.uint8)


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with outward-wound faces."""
    g = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0), (0, -1, g), (0, 1, g),
             (0, -1, -g), (0, 1, -g), (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts)
    # the seed faces are counter-clockwise seen from outside, and so is every subdivision
    return v, np.array(faces, dtype=np.int64)


# --- scenes and rendering ------------------------------------------------

def rotation_from_angles(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Camera-to-world rotation ``Ry(yaw) @ Rx(pitch) @ Rz(roll)`` from degrees."""
    y, p, r = np.radians([yaw, pitch, roll])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return ry @ rx @ rz


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    trajectory: list[Pose] = field(default_factory=list)
    resolution: tuple[int, int] = (512, 256)    # (W, H)

    @property
    def intr(self) -> ErpIntrinsics:
        return ErpIntrinsics(*self.resolution)

    def check_camera(self, pose: Pose) -> None:
        c = pose.center
        for prim in self.primitives:
            inside = prim.contains(c)
            if prim.inward and not inside:
                raise SceneError(f"camera at {c} is outside an enclosing primitive")
            if not prim.inward and inside:
                raise SceneError(f"camera at {c} is inside a solid primitive")


@dataclass(frozen=True)
class RenderedFrame:
    image: np.ndarray       # (H, W, 3) uint8
    depth: DepthMap
    pose: Pose


def cast_rays(spec: SceneSpec, origin: np.ndarray,
              dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit distance, primitive index and face axis for world rays ``(N, 3)``."""
    n = len(dirs)
    best = np.full(n, np.inf)
    which = np.full(n, -1, dtype=np.int64)
    axis = np.full(n, -1, dtype=np.int64)
    for k, prim in enumerate(spec.primitives):
        t, ax = prim.intersect(origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, k, which)
        axis = np.where(closer, ax, axis)
    return best, which, axis


def render(spec: SceneSpec, frame_index: int) -> RenderedFrame:
    """Ray-cast one ERP frame of the trajectory."""
    if not 0 <= frame_index < len(spec.trajectory):
        raise SceneError(f"frame {frame_index} outside trajectory of {len(spec.trajectory)}")
    pose = spec.trajectory[frame_index]
    spec.check_camera(pose)
    intr = spec.intr
    rays_cam = pixel_rays(intr).reshape(-1, 3)
    rays = rigid_apply(pose.rotation.T, np.zeros(3), rays_cam)
    origin = pose.center
    t, which, axis = cast_rays(spec, origin, rays)
    color = np.zeros((len(rays), 3))
    for k, prim in enumerate(spec.primitives):
        sel = which == k
        if np.any(sel):
            hits = origin + rays[sel] * t[sel, None]
            color[sel] = prim.texture.evaluate(hits, axis[sel])
    image = np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8).reshape(intr.height, intr.width, 3)
    depth = DepthMap.from_array(np.where(np.isfinite(t), t, np.nan).reshape(intr.shape))
    return RenderedFrame(image, depth, pose)


def gt_mesh(spec: SceneSpec) -> TriangleMesh:
    """Exact triangulation of every primitive surface."""
    return TriangleMesh.concatenate([p.mesh() for p in spec.primitives])


# --- scene files ---------------------------------------------------------

def _parse_texture(tokens: list[str]) -> Texture:
    if not tokens:
        return Texture()
    kind, args = tokens[0], [float(x) for x in tokens[1:]]
    if kind == "solid":
        if len(args) != 3:
            raise SceneError("solid texture needs r g b")
        return Texture("solid", color_a=tuple(args))
    if kind == "checker":
        if not 1 <= len(args) <= 4:
            raise SceneError("checker texture needs scale [jitter [octaves [seed]]]")
        kw = dict(scale=args[0])
        if len(args) > 1:
            kw["jitter"] = args[1]
        if len(args) > 2:
            kw["octaves"] = int(args[2])
        if len(args) > 3:
            kw["seed"] = int(args[3])
        return Texture("checker", **kw)
    if kind == "gradient":
        if len(args) not in (1, 7):
            raise SceneError("gradient texture needs scale [r g b r g b]")
        if len(args) == 7:
            return Texture("gradient", args[0], tuple(args[1:4]), tuple(args[4:7]))
        return Texture("gradient", args[0])
    raise SceneError(f"unknown texture {kind!r}")


def parse_scene(text: str) -> SceneSpec:
    spec = SceneSpec()
    for lineno, raw in enumerate(text.splitlines(), 1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        key, rest = tokens[0], tokens[1:]
        try:
            if key == "resolution":
                spec.resolution = (int(rest[0]), int(rest[1]))
                ErpIntrinsics(*spec.resolution)
            elif key in ("room", "box"):
                nums = [float(x) for x in rest[:6]]
                if len(nums) != 6:
                    raise SceneError(f"{key} needs center and size")
                spec.primitives.append(Box(tuple(nums[:3]), tuple(nums[3:]),
                                           _parse_texture(rest[6:]), inward=key == "room"))
            elif key == "sphere":
                nums = [float(x) for x in rest[:4]]
                inward = len(rest) > 4 and rest[4] == "inward"
                tex = rest[5:] if inward else rest[4:]
                spec.primitives.append(Sphere(tuple(nums[:3]), nums[3], _parse_texture(tex), inward))
            elif key == "camera":
                nums = [float(x) for x in rest]
                if len(nums) not in (3, 6):
                    raise SceneError("camera needs x y z [yaw pitch roll]")
                angles = nums[3:] if len(nums) == 6 else [0.0, 0.0, 0.0]
                spec.trajectory.append(Pose.from_camera_center(rotation_from_angles(*angles), nums[:3]))
            else:
                raise SceneError(f"unknown keyword {key!r}")
        except (IndexError, ValueError) as exc:
            raise SceneError(f"line {lineno}: {exc}") from exc
    if not spec.primitives:
        raise SceneError("scene has no primitives")
    if not spec.trajectory:
        raise SceneError("scene has no cameras")
    for pose in spec.trajectory:
        spec.check_camera(pose)
    return spec


def load_scene(path: str | Path) -> SceneSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SceneError(f"cannot read scene {path}: {exc.strerror}") from None
    return parse_scene(text)


BENCHMARK_ROOM = """\
# 4 x 3 x 4 m room, y points down (floor at y = +1.5)
resolution {width} {height}
room 0 0 0  4 3 4  checker 0.12 0.5 2 7
camera  0.00 0.10  0.00
camera  0.30 0.05  0.15   20 0 0
camera -0.15 0.15  0.35  -15 0 10
"""


def benchmark_room(width: int = 512, height: int = 256) -> SceneSpec:
    """Checker-textured empty room with three frames (0.2-0.5 m baselines, one rolled)."""
    return parse_scene(BENCHMARK_ROOM.format(width=width, height=height))
