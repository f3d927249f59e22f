"""Spherical sweeping: radial depth hypotheses, feature warping, cost volumes
and depth extraction.

Depth is radial (distance to the camera center) everywhere. The equal-depth
surface for a hypothesis is a sphere around the reference camera.

Classical feature maps are not warped as images. For every hypothesis the
reference pixel's descriptor taps are placed on the sphere, moved into the
source camera, and the source descriptor is rebuilt from the source gray
image at those positions. Near the poles a baseline rotates the local
east/north frame between views, and this keeps both descriptors in the
reference frame. Network feature maps are warped per pixel center.

Per-hypothesis work is independent, so ``threads`` shards hypotheses over a
thread pool. Every hypothesis is computed by the same code on arrays of the
same shape, which keeps results bitwise identical for any thread count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .camera import ErpIntrinsics, Pose, cartesian_to_spherical, pixel_grid, project, \
    rigid_apply, spherical_to_cartesian, unproject
from .features import FeatureMap, MlpWeights, mlp_forward
from .sphere_kernel import bilinear_wrap

DEGENERATE_RADIUS = 1e-9


@dataclass(frozen=True)
class DepthHypotheses:
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    @property
    def d_min(self) -> float:
        return float(self.values[0])

    @property
    def d_max(self) -> float:
        return float(self.values[-1])

    def spacing_at(self, depth: float) -> float:
        """Gap between neighboring hypotheses around ``depth`` (log-uniform)."""
        ratio = np.exp((np.log(self.d_max) - np.log(self.d_min)) / (len(self) - 1))
        return float(depth * (ratio - 1.0))


def make_hypotheses(d_min: float, d_max: float, count: int) -> DepthHypotheses:
    """``count`` radii spaced uniformly in log-depth, endpoints exact."""
    if not 0.0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if count < 2:
        raise ValueError(f"need at least two hypotheses, got {count}")
    lo, hi = np.log(d_min), np.log(d_max)
    values = np.exp(lo + (np.arange(count) / (count - 1)) * (hi - lo))
    values[0], values[-1] = d_min, d_max
    return DepthHypotheses(values)


@dataclass(frozen=True)
class DepthMap:
    """Radial depth in meters; invalid pixels hold NaN and are False in ``valid``."""

    depth: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_array(cls, depth: np.ndarray) -> "DepthMap":
        d = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(d) & (d > 0)
        return cls(np.where(valid, d, np.nan), valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def intr(self) -> ErpIntrinsics:
        return ErpIntrinsics.from_shape(self.depth.shape)


@dataclass(frozen=True)
class CostVolume:
    """Channels ``[f_ref, f_src_1..n, dot_1..n]`` per (hypothesis, pixel)."""

    data: np.ndarray        # (C, D, H, W)
    valid: np.ndarray       # (D, H, W)
    n_sources: int
    feature_dim: int

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ProbabilityVolume:
    probs: np.ndarray       # (D, H, W)
    valid: np.ndarray       # (H, W)


def unit_rays(u, v, intr: ErpIntrinsics) -> np.ndarray:
    """Unit viewing directions ``(..., 3)`` of pixel positions."""
    return spherical_to_cartesian(unproject((u, v), intr), 1.0)


def warp_pixels(u, v, r, ref_pose: Pose, src_pose: Pose, intr: ErpIntrinsics,
                rays: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source-image coordinates of reference positions placed at radius ``r``.

    The 3D point is ``r`` times the unit ray of ``(u, v)``; pass ``rays``
    (from :func:`unit_rays`) to skip recomputing them. Returns
    ``(u_src, v_src, valid)``; ``valid`` is False only where the point
    coincides with the source camera center.
    """
    if rays is None:
        rays = unit_rays(u, v, intr)
    # Transform point / r rather than the point: the projection only needs the
    # direction, and without a baseline it then comes out bitwise independent of r.
    rs = np.broadcast_to(np.asarray(r, dtype=np.float64), rays.shape[:-1] + (1,))[..., 0]
    t = ref_pose.translation
    q = np.stack([rays[..., 0] - t[0] / rs, rays[..., 1] - t[1] / rs,
                  rays[..., 2] - t[2] / rs], axis=-1)
    world = rigid_apply(ref_pose.rotation.T, np.zeros(3), q)
    point = rigid_apply(src_pose.rotation, np.zeros(3), world)
    t = src_pose.translation
    point = np.stack([point[..., 0] + t[0] / rs, point[..., 1] + t[1] / rs,
                      point[..., 2] + t[2] / rs], axis=-1)
    rad = np.sqrt(point[..., 0] * point[..., 0] + point[..., 1] * point[..., 1]
                  + point[..., 2] * point[..., 2])
    valid = rad * rs > DEGENERATE_RADIUS
    if not np.all(valid):
        point = np.where(valid[..., None], point, np.array([0.0, 0.0, 1.0]))
    (theta, phi), _ = cartesian_to_spherical(point)
    pu, pv = project((theta, phi), intr)
    pu = np.where(pu >= intr.width, pu - intr.width, pu)
    return pu, pv, valid


@dataclass(frozen=True)
class SweepPlan:
    """Reference-side quantities shared by every hypothesis.

    With ``tap_warp`` the positions are the reference descriptor taps
    ``(H, W, T)`` and source descriptors are rebuilt at their warped
    positions. Otherwise they are pixel centers ``(H, W)`` and source
    features are bilinearly interpolated.
    """

    intr: ErpIntrinsics
    u: np.ndarray
    v: np.ndarray
    rays: np.ndarray
    tap_warp: bool


def make_plan(ref_feat: FeatureMap, src_feats: Sequence[FeatureMap],
              intr: ErpIntrinsics | None = None, tap_warp: bool = True) -> SweepPlan:
    if intr is None:
        intr = ref_feat.intr
    elif intr.shape != ref_feat.data.shape[:2]:
        raise ValueError(f"intrinsics {intr.shape} do not match features {ref_feat.data.shape[:2]}")
    tap_warp = tap_warp and ref_feat.taps is not None and all(f.taps is not None for f in src_feats)
    if tap_warp:
        u, v = ref_feat.taps.grid.u, ref_feat.taps.grid.v
    else:
        u, v = pixel_grid(intr)
    return SweepPlan(intr, u, v, unit_rays(u, v, intr), tap_warp)


def warp_feature(plan: SweepPlan, r: float, ref_pose: Pose, src_pose: Pose,
                 src_feat: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Source features seen from reference pixels at radius ``r``.

    Returns ``(H, W, F)`` features (zero where invalid) and ``(H, W)`` validity.
    """
    pu, pv, valid = warp_pixels(plan.u, plan.v, r, ref_pose, src_pose, plan.intr, plan.rays)
    if plan.tap_warp:
        feat = src_feat.taps.descriptors(pu, pv)
        valid = np.all(valid, axis=-1)
    else:
        feat = bilinear_wrap(src_feat.data, pu, pv)
    return np.where(valid[..., None], feat, 0.0), valid


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed left-to-right channel order; the brute-force oracle relies on it
    acc = a[..., 0] * b[..., 0]
    for c in range(1, a.shape[-1]):
        acc = acc + a[..., c] * b[..., c]
    return acc


def _check_inputs(ref_feat: FeatureMap, src_feats: Sequence[FeatureMap],
                  src_poses: Sequence[Pose]) -> None:
    if not src_feats:
        raise ValueError("need at least one source frame")
    if len(src_feats) != len(src_poses):
        raise ValueError(f"{len(src_feats)} source features but {len(src_poses)} poses")
    for f in src_feats:
        if f.data.shape != ref_feat.data.shape:
            raise ValueError(f"source features {f.data.shape} != reference {ref_feat.data.shape}")


def cost_slice(ref_feat: FeatureMap, src_feats: Sequence[FeatureMap], ref_pose: Pose,
               src_poses: Sequence[Pose], r: float,
               plan: SweepPlan) -> tuple[np.ndarray, np.ndarray]:
    """One hypothesis of the cost volume: ``(C, H, W)`` channels and ``(H, W)`` validity."""
    ref = ref_feat.data
    warped, valid = [], np.ones(plan.intr.shape, dtype=bool)
    for feat, pose in zip(src_feats, src_poses):
        f, ok = warp_feature(plan, r, ref_pose, pose, feat)
        warped.append(f)
        valid &= ok
    dots = [_dot(ref, f) for f in warped]
    channels = [np.moveaxis(ref, -1, 0)] + [np.moveaxis(f, -1, 0) for f in warped]
    channels.append(np.stack(dots, axis=0))
    return np.concatenate(channels, axis=0), valid


def _map(fn: Callable, items: Iterable, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def build_cost_volume(ref_feat: FeatureMap, src_feats: Sequence[FeatureMap], ref_pose: Pose,
                      src_poses: Sequence[Pose], hyps: DepthHypotheses,
                      intr: ErpIntrinsics | None = None, threads: int = 1,
                      tap_warp: bool = True) -> CostVolume:
    """Materialize the full ``C x D x H x W`` volume, ``C = (n+1)*F + n``."""
    _check_inputs(ref_feat, src_feats, src_poses)
    plan = make_plan(ref_feat, src_feats, intr, tap_warp)
    slices = _map(lambda r: cost_slice(ref_feat, src_feats, ref_pose, src_poses, r, plan),
                  hyps.values, threads)
    data = np.stack([s for s, _ in slices], axis=1)
    valid = np.stack([ok for _, ok in slices], axis=0)
    return CostVolume(data, valid, len(src_feats), ref_feat.dim)


def score_slice(channels: np.ndarray, n_sources: int, reducer: MlpWeights | None) -> np.ndarray:
    """Per-pixel raw score for one hypothesis slice ``(C, H, W)``.

    Without a reducer the score is the mean of the ``n`` dot-product channels.
    """
    if reducer is None:
        dots = channels[channels.shape[0] - n_sources:]
        acc = dots[0]
        for k in range(1, n_sources):
            acc = acc + dots[k]
        return acc / n_sources
    if channels.shape[0] != reducer.in_dim:
        raise ValueError(f"cost volume has {channels.shape[0]} channels, MLP expects {reducer.in_dim}")
    return mlp_forward(np.ascontiguousarray(np.moveaxis(channels, 0, -1)), reducer)


def softmax_volume(scores: np.ndarray, valid: np.ndarray) -> ProbabilityVolume:
    """Softmax over hypotheses (axis 0), ignoring invalid entries.

    Pixels without any valid hypothesis get a uniform distribution and are
    flagged invalid.
    """
    masked = np.where(valid, scores, -np.inf)
    peak = masked.max(axis=0)
    pixel_valid = np.isfinite(peak)
    e = np.exp(masked - np.where(pixel_valid, peak, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = e / e.sum(axis=0)
    probs = np.where(pixel_valid, probs, 1.0 / scores.shape[0])
    return ProbabilityVolume(probs, pixel_valid)


def reduce_volume(cv: CostVolume, reducer: MlpWeights | None = None) -> ProbabilityVolume:
    """Collapse channels to one score per (hypothesis, pixel), then softmax."""
    if reducer is not None and cv.channels != reducer.in_dim:
        raise ValueError(f"cost volume has {cv.channels} channels, MLP expects {reducer.in_dim}")
    scores = np.stack([score_slice(cv.data[:, d], cv.n_sources, reducer)
                       for d in range(cv.data.shape[1])], axis=0)
    return softmax_volume(scores, cv.valid)


def sweep(ref_feat: FeatureMap, src_feats: Sequence[FeatureMap], ref_pose: Pose,
          src_poses: Sequence[Pose], hyps: DepthHypotheses, reducer: MlpWeights | None = None,
          intr: ErpIntrinsics | None = None, threads: int = 1,
          tap_warp: bool = True) -> ProbabilityVolume:
    """Build, score and normalize hypothesis by hypothesis without storing the volume.

    Equivalent to ``reduce_volume(build_cost_volume(...), reducer)``.
    """
    _check_inputs(ref_feat, src_feats, src_poses)
    plan = make_plan(ref_feat, src_feats, intr, tap_warp)
    n = len(src_feats)

    def one(r: float) -> tuple[np.ndarray, np.ndarray]:
        channels, ok = cost_slice(ref_feat, src_feats, ref_pose, src_poses, r, plan)
        return score_slice(channels, n, reducer), ok

    results = _map(one, hyps.values, threads)
    scores = np.stack([s for s, _ in results], axis=0)
    valid = np.stack([ok for _, ok in results], axis=0)
    return softmax_volume(scores, valid)


def median3x3(depth: DepthMap) -> DepthMap:
    """3x3 median over valid neighbors (columns wrap, rows clamp)."""
    d = depth.depth
    h = d.shape[0]
    stack = []
    for dy in (-1, 0, 1):
        rows = d[np.clip(np.arange(h) + dy, 0, h - 1)]
        for dx in (-1, 0, 1):
            stack.append(np.roll(rows, -dx, axis=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(np.stack(stack, axis=0), axis=0)
    return DepthMap(np.where(depth.valid, med, np.nan), depth.valid)


def extract_depth(pv: ProbabilityVolume, hyps: DepthHypotheses, mode: str = "argmax",
                  median: bool = False) -> DepthMap:
    """Depth per pixel from the probability volume.

    ``argmax`` picks the most probable hypothesis (ties go to the smaller
    depth); ``soft`` takes the expectation in log-depth.
    """
    if pv.probs.shape[0] != len(hyps):
        raise ValueError(f"volume has {pv.probs.shape[0]} hypotheses, expected {len(hyps)}")
    if mode == "argmax":
        depth = hyps.values[np.argmax(pv.probs, axis=0)]
    elif mode == "soft":
        log_d = np.log(hyps.values)[:, None, None]
        depth = np.exp(np.sum(pv.probs * log_d, axis=0))
        depth = np.clip(depth, hyps.d_min, hyps.d_max)
    else:
        raise ValueError(f"unknown extraction mode {mode!r}")
    out = DepthMap(np.where(pv.valid, depth, np.nan), pv.valid.copy())
    return median3x3(out) if median else out


def confidence(pv: ProbabilityVolume) -> np.ndarray:
    """Per-pixel max probability (NaN where invalid)."""
    return np.where(pv.valid, pv.probs.max(axis=0), np.nan)
