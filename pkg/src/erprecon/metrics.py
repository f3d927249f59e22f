"""Depth metrics, mesh reconstruction metrics and the four training-loss terms,
all as pure evaluation functions.

Distances are reported in centimeters and ratios in percent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import Pose, cartesian_to_spherical, pixel_rays, project, transform_point
from .mesh import TriangleMesh
from .sphere_kernel import bilinear_wrap
from .sweep import DepthMap

DELTA1_RATIO = 1.25
DEFAULT_SAMPLES = 200_000
DEFAULT_THRESHOLD_CM = 5.0
OCCLUSION_MARGIN = 0.05   # meters


class MetricError(ValueError):
    """Inputs admit no meaningful comparison (no overlap, empty meshes)."""


@dataclass(frozen=True)
class DepthMetrics:
    mae_cm: float
    mre_pct: float
    rmse_cm: float
    delta1_pct: float
    count: int = 0


@dataclass(frozen=True)
class MeshMetrics:
    comp_cm: float
    acc_cm: float
    chamfer_cm: float
    fscore_pct: float
    threshold_cm: float = DEFAULT_THRESHOLD_CM
    precision_pct: float = 0.0
    recall_pct: float = 0.0


def _as_depth(d) -> DepthMap:
    return d if isinstance(d, DepthMap) else DepthMap.from_array(d)


def depth_metrics(pred, gt) -> DepthMetrics:
    """MAE, MRE, RMSE and delta_1 over pixels valid in both maps."""
    pred, gt = _as_depth(pred), _as_depth(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = pred.valid & gt.valid
    if not np.any(mask):
        raise MetricError("no pixel is valid in both depth maps")
    p, g = pred.depth[mask], gt.depth[mask]
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        mae_cm=float(np.mean(np.abs(err)) * 100.0),
        mre_pct=float(np.mean(np.abs(err) / g) * 100.0),
        rmse_cm=float(np.sqrt(np.mean(err * err)) * 100.0),
        delta1_pct=float(np.mean(ratio < DELTA1_RATIO) * 100.0),
        count=int(mask.sum()),
    )


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points drawn uniformly by area over the mesh surface (seeded)."""
    if mesh.is_empty:
        raise MetricError("cannot sample an empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise MetricError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    a, b = rng.random(n), rng.random(n)
    flip = a + b > 1.0
    a, b = np.where(flip, 1.0 - a, a), np.where(flip, 1.0 - b, b)
    v = mesh.vertices[mesh.triangles[tri]]
    return v[:, 0] + a[:, None] * (v[:, 1] - v[:, 0]) + b[:, None] * (v[:, 2] - v[:, 0])


def mesh_metrics(pred: TriangleMesh, gt: TriangleMesh, threshold_cm: float = DEFAULT_THRESHOLD_CM,
                 n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> MeshMetrics:
    """Point-sampled accuracy, completeness, Chamfer and F-score.

    Both meshes are sampled with the same seed, so swapping the arguments
    swaps accuracy and completeness exactly and a mesh compared with itself
    scores zero distance.
    """
    if pred.is_empty or gt.is_empty:
        raise MetricError("mesh metrics need two non-empty meshes")
    if threshold_cm <= 0:
        raise MetricError(f"threshold must be positive, got {threshold_cm}")
    p = sample_surface(pred, n_samples, seed)
    g = sample_surface(gt, n_samples, seed)
    d_acc, _ = cKDTree(g).query(p)
    d_comp, _ = cKDTree(p).query(g)
    acc, comp = float(np.mean(d_acc) * 100.0), float(np.mean(d_comp) * 100.0)
    tau = threshold_cm / 100.0
    precision = float(np.mean(d_acc < tau))
    recall = float(np.mean(d_comp < tau))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MeshMetrics(comp_cm=comp, acc_cm=acc, chamfer_cm=(acc + comp) / 2.0,
                       fscore_pct=f * 100.0, threshold_cm=float(threshold_cm),
                       precision_pct=precision * 100.0, recall_pct=recall * 100.0)


# --- losses --------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    grad: float = 1.0
    normals: float = 1.0
    mv: float = 0.2


@dataclass(frozen=True)
class LossBreakdown:
    depth: float
    grad: float
    normals: float
    mv: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass(frozen=True)
class SourceView:
    """A source frame's ground-truth depth and pose, used by the multi-view term."""

    depth: DepthMap
    pose: Pose


def _log_depth(d: DepthMap) -> np.ndarray:
    return np.where(d.valid, np.log(np.where(d.valid, d.depth, 1.0)), np.nan)


def _depth_term(p: DepthMap, g: DepthMap) -> float:
    mask = p.valid & g.valid
    if not np.any(mask):
        raise MetricError("no jointly valid pixels at some scale")
    return float(np.mean(np.abs(_log_depth(p)[mask] - _log_depth(g)[mask])))


def _grad_term(p: DepthMap, g: DepthMap) -> float:
    """Mean absolute difference of log-depth gradients (columns wrap)."""
    e = _log_depth(p) - _log_depth(g)
    dx = np.roll(e, -1, axis=1) - e
    dy = e[1:] - e[:-1]
    parts = [np.abs(a[np.isfinite(a)]) for a in (dx, dy)]
    vals = np.concatenate(parts)
    return float(np.mean(vals)) if len(vals) else 0.0


def _normals(d: DepthMap) -> np.ndarray:
    """Unit normals from back-projected neighbors; NaN where undefined."""
    pts = pixel_rays(d.intr) * d.depth[..., None]
    east = np.roll(pts, -1, axis=1) - pts
    south = np.full_like(pts, np.nan)
    south[:-1] = pts[1:] - pts[:-1]
    n = np.cross(east, south)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, n / norm, np.nan)


def _normals_term(p: DepthMap, g: DepthMap) -> float:
    cos = np.sum(_normals(p) * _normals(g), axis=-1)
    ok = np.isfinite(cos)
    return float(np.mean(1.0 - cos[ok])) if np.any(ok) else 0.0


def _mv_term(p: DepthMap, ref_pose: Pose, sources: Sequence[SourceView]) -> float:
    """Mean |log r_src - log gt_src| of reference predictions seen from each source."""
    pts = pixel_rays(p.intr) * np.where(p.valid, p.depth, 1.0)[..., None]
    per_source = []
    for src in sources:
        intr = src.depth.intr
        cam = transform_point(pts[p.valid], ref_pose, src.pose)
        r = np.linalg.norm(cam, axis=-1)
        ok = r > 0
        s, _ = cartesian_to_spherical(np.where(ok[:, None], cam, np.array([0.0, 0.0, 1.0])))
        u, v = project(s, intr)
        u = np.where(u >= intr.width, u - intr.width, u)
        log_gt = bilinear_wrap(_log_depth(src.depth)[..., None], u, v)[:, 0]
        gt = bilinear_wrap(np.where(src.depth.valid, src.depth.depth, np.nan)[..., None], u, v)[:, 0]
        ok &= np.isfinite(log_gt) & ~(r - gt > OCCLUSION_MARGIN)
        if np.any(ok):
            per_source.append(np.mean(np.abs(np.log(r[ok]) - log_gt[ok])))
    return float(np.mean(per_source)) if per_source else 0.0


def losses(pred: Sequence[DepthMap], gt: Sequence[DepthMap], ref_pose: Pose | None = None,
           sources: Sequence[SourceView] = (), weights: LossWeights = LossWeights()) -> LossBreakdown:
    """The four loss terms and their weighted total.

    Args:
        pred: predicted depth pyramid, finest scale first.
        gt: ground-truth pyramid aligned with ``pred``.
        ref_pose: reference pose; needed only when ``sources`` is non-empty.
        sources: source-frame ground truth for the multi-view term. Source
            pixels where the warped point lies more than 5 cm behind the
            source ground truth are treated as occluded and skipped.
        weights: the alpha factors of the total.

    The depth and gradient terms are averaged over scales; normals and the
    multi-view term use the finest scale.
    """
    pred, gt = [_as_depth(d) for d in pred], [_as_depth(d) for d in gt]
    if not pred or len(pred) != len(gt):
        raise MetricError(f"pyramids have {len(pred)} and {len(gt)} levels")
    for a, b in zip(pred, gt):
        if a.shape != b.shape:
            raise MetricError(f"misaligned pyramid level: {a.shape} vs {b.shape}")
    if sources and ref_pose is None:
        raise MetricError("the multi-view term needs the reference pose")
    depth = float(np.mean([_depth_term(a, b) for a, b in zip(pred, gt)]))
    grad = float(np.mean([_grad_term(a, b) for a, b in zip(pred, gt)]))
    normals = _normals_term(pred[0], gt[0])
    mv = _mv_term(pred[0], ref_pose, sources) if sources else 0.0
    total = depth + weights.grad * grad + weights.normals * normals + weights.mv * mv
    return LossBreakdown(depth, grad, normals, mv, total, weights)


# --- reports -------------------------------------------------------------

DEPTH_KEYS = ("mae_cm", "mre_pct", "rmse_cm", "delta1_pct")
MESH_KEYS = ("comp_cm", "acc_cm", "chamfer_cm", "fscore_pct")


def report_dict(depth: DepthMetrics | None = None, mesh: MeshMetrics | None = None) -> dict:
    out = {}
    if depth is not None:
        out.update({k: asdict(depth)[k] for k in DEPTH_KEYS})
    if mesh is not None:
        out.update({k: asdict(mesh)[k] for k in MESH_KEYS})
    return out


def report_text(report: dict) -> str:
    """One ``key=value`` line per metric."""
    return "".join(f"{k}={v:.6f}\n" for k, v in report.items())


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"
