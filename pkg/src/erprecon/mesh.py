"""Triangle meshes and binary PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    colors: np.ndarray | None = None    # (N, 3) uint8

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.full((len(self.vertices), 3), 200, dtype=np.uint8)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.colors) != len(self.vertices):
            raise ValueError("one color per vertex required")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized normals by the right-hand rule on (v0, v1, v2)."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def transformed(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64),
                            self.triangles.copy(), self.colors.copy())

    @staticmethod
    def concatenate(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        verts, tris, cols, base = [], [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + base)
            cols.append(m.colors)
            base += len(m.vertices)
        if not meshes:
            return TriangleMesh()
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris), np.concatenate(cols))


_VERTEX_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")])
_FACE_DTYPE = np.dtype([("n", "u1"), ("i", "<i4", (3,))])


def export_ply(mesh: TriangleMesh, path: str | Path) -> None:
    """Binary little-endian PLY with x y z (double), red green blue and faces."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    verts = np.empty(len(mesh.vertices), dtype=_VERTEX_DTYPE)
    for k, name in enumerate("xyz"):
        verts[name] = mesh.vertices[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        verts[name] = mesh.colors[:, k]
    faces = np.empty(len(mesh.triangles), dtype=_FACE_DTYPE)
    faces["n"] = 3
    faces["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())


def read_ply(path: str | Path) -> TriangleMesh:
    """Read the binary PLY layout written by :func:`export_ply`."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    counts = {}
    props: dict[str, list[str]] = {}
    current = None
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            current = parts[1]
            counts[current] = int(parts[2])
            props[current] = []
        elif parts[:1] == ["property"] and current is not None:
            props[current].append(" ".join(parts[1:]))
    expected_v = ["double x", "double y", "double z", "uchar red", "uchar green", "uchar blue"]
    if props.get("vertex") != expected_v or props.get("face") != ["list uchar int vertex_indices"]:
        raise ValueError(f"{path}: unsupported PLY property layout")
    body = raw[end + len(b"end_header\n"):]
    nv, nf = counts["vertex"], counts["face"]
    verts = np.frombuffer(body, dtype=_VERTEX_DTYPE, count=nv)
    faces = np.frombuffer(body, dtype=_FACE_DTYPE, count=nf, offset=nv * _VERTEX_DTYPE.itemsize)
    if nf and np.any(faces["n"] != 3):
        raise ValueError(f"{path}: only triangle faces are supported")
    vertices = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    colors = np.stack([verts["red"], verts["green"], verts["blue"]], axis=1)
    return TriangleMesh(vertices, faces["i"].astype(np.int64), colors)
