"""Command-line interface: ``render``, ``depth``, ``fuse``, ``eval`` and ``pipeline``.

Frame directories hold ``poses.txt`` (one ``name`` plus row-major 3x4
``[R | t]`` line per frame, world-to-camera) plus ``<name>.png`` images
and, for rendered scenes, ``<name>.pfm`` ground-truth radial depth. Depth directories hold
``<name>.pfm`` predictions and ``<name>.conf.pfm`` confidences.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import Pose, pixel_rays, read_poses, write_poses
from .config import ConfigError, PipelineConfig, load_config
from .features import FeatureMap, classical_features, decimate, downsample, load_mlp, load_network, \
    network_features
from .io import read_image, read_pfm, write_image, write_pfm
from .mesh import TriangleMesh, export_ply, read_ply
from .metrics import MetricError, depth_metrics, mesh_metrics, report_dict, report_json, report_text
from .sweep import DepthMap, confidence, extract_depth, make_hypotheses, sweep
from .synth import SceneError, gt_mesh, load_scene, render
from .tsdf import TsdfGrid, extract_mesh, integrate_frame, save_grid

log = logging.getLogger("erprecon")

CONFIG_ECHO = "config.txt"
GRID_FILE = "grid.tsdf"
MESH_FILE = "mesh.ply"
GT_MESH_FILE = "gt_mesh.ply"


class UsageError(Exception):
    """Bad inputs that the user must fix (exit code 2)."""


# --- frame directories ---------------------------------------------------

def frame_name(index: int) -> str:
    return f"frame_{index:03d}"


def load_frames(frames_dir: Path) -> tuple[list[str], dict[str, Pose]]:
    pose_file = frames_dir / "poses.txt"
    if not pose_file.is_file():
        raise UsageError(f"{frames_dir}: missing poses.txt")
    poses = read_poses(pose_file)
    if not poses:
        raise UsageError(f"{pose_file}: no frames listed")
    return list(poses), poses


def _read_required(path: Path, reader):
    if not path.is_file():
        raise UsageError(f"missing input file {path}")
    return reader(path)


# --- pipeline steps ------------------------------------------------------

def compute_features(image: np.ndarray, cfg: PipelineConfig) -> FeatureMap:
    if cfg.feature_mode == "network":
        return network_features(image, load_network(cfg.network_path))
    return classical_features(image, cfg.descriptor_radius, cfg.feature_scale)


def estimate_depth(images: Sequence[np.ndarray], poses: Sequence[Pose], ref: int,
                   srcs: Sequence[int], cfg: PipelineConfig) -> tuple[DepthMap, np.ndarray]:
    """Sweep frame ``ref`` against ``srcs``; returns depth and max-probability confidence."""
    if not srcs:
        raise UsageError("depth estimation needs at least one source frame")
    for s in srcs:
        if np.linalg.norm(poses[s].center - poses[ref].center) < 1e-9:
            log.warning("zero baseline between reference %d and source %d; depth is unobservable",
                        ref, s)
    feats = [compute_features(images[i], cfg) for i in [ref, *srcs]]
    reducer = load_mlp(cfg.mlp_path) if cfg.reducer == "mlp" else None
    hyps = make_hypotheses(cfg.d_min, cfg.d_max, cfg.n_planes)
    pv = sweep(feats[0], feats[1:], poses[ref], [poses[s] for s in srcs], hyps,
               reducer=reducer, threads=cfg.threads)
    depth = extract_depth(pv, hyps, cfg.extract, median=cfg.median)
    return depth, confidence(pv)


def match_resolution(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Halve ``image`` until it has ``shape`` (pixel centers stay aligned)."""
    out = np.asarray(image, dtype=np.float64)
    while out.shape[:2] != shape:
        if out.shape[0] <= shape[0] or out.shape[0] % 2:
            raise UsageError(f"image {out.shape[:2]} cannot be reduced to depth shape {shape}")
        out = downsample(out)
    return out


def fuse_frames(depths: Sequence[DepthMap], colors: Sequence[np.ndarray], poses: Sequence[Pose],
                cfg: PipelineConfig) -> tuple[TsdfGrid, TriangleMesh]:
    """Integrate all frames into a grid bounding the observed points."""
    points = []
    for d, pose in zip(depths, poses):
        pts = (pixel_rays(d.intr) * d.depth[..., None])[d.valid]
        points.append(pose.apply_inverse(pts))
    points = np.concatenate(points) if points else np.zeros((0, 3))
    if len(points) == 0:
        raise UsageError("no valid depth to fuse")
    margin = int(np.ceil(cfg.truncation / cfg.voxel_size)) + 1
    grid = TsdfGrid.covering(points.min(axis=0), points.max(axis=0), cfg.voxel_size, margin)
    for d, color, pose in zip(depths, colors, poses):
        color = match_resolution(color, d.shape)
        integrate_frame(grid, d, color, pose, d.intr, cfg.truncation, cfg.max_weight, cfg.threads)
    return grid, extract_mesh(grid)


def pooled_depth_metrics(preds: Sequence[DepthMap], gts: Sequence[DepthMap]):
    """Depth metrics over all frames, ground truth decimated to the prediction grid."""
    p_all, g_all = [], []
    for p, g in zip(preds, gts):
        g = align_gt(p, g)
        p_all.append(p.depth)
        g_all.append(g.depth)
    return depth_metrics(np.concatenate(p_all), np.concatenate(g_all))


def align_gt(pred: DepthMap, gt: DepthMap) -> DepthMap:
    if gt.shape == pred.shape:
        return gt
    factor = gt.shape[0] // pred.shape[0]
    if factor < 1 or gt.shape != (pred.shape[0] * factor, pred.shape[1] * factor):
        raise MetricError(f"ground truth {gt.shape} is not a multiple of prediction {pred.shape}")
    return DepthMap.from_array(decimate(gt.depth, factor))


# --- subcommands ---------------------------------------------------------

def write_config(out: Path, cfg: PipelineConfig) -> None:
    (out / CONFIG_ECHO).write_text(cfg.to_text())


def cmd_render(args, cfg: PipelineConfig) -> int:
    spec = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = {}
    for i in range(len(spec.trajectory)):
        frame = render(spec, i)
        name = frame_name(i)
        write_image(out / f"{name}.png", frame.image)
        write_pfm(out / f"{name}.pfm", frame.depth.depth)
        poses[name] = frame.pose
    write_poses(out / "poses.txt", poses)
    export_ply(gt_mesh(spec), out / GT_MESH_FILE)
    write_config(out, cfg)
    print(f"rendered {len(poses)} frames to {out}")
    return 0


def cmd_depth(args, cfg: PipelineConfig) -> int:
    frames_dir = Path(args.frames)
    names, poses = load_frames(frames_dir)
    refs = range(len(names)) if args.ref is None else [args.ref]
    for idx in [*refs, *(args.src or [])]:
        if not 0 <= idx < len(names):
            raise UsageError(f"frame index {idx} out of range (have {len(names)} frames)")
    images = [_read_required(frames_dir / f"{n}.png", read_image) for n in names]
    pose_list = [poses[n] for n in names]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ref in refs:
        srcs = args.src if args.src else [i for i in range(len(names)) if i != ref]
        depth, conf = estimate_depth(images, pose_list, ref, srcs, cfg)
        write_pfm(out / f"{names[ref]}.pfm", depth.depth)
        write_pfm(out / f"{names[ref]}.conf.pfm", conf)
        print(f"{names[ref]}: depth {depth.shape[1]}x{depth.shape[0]} from sources {list(srcs)}")
    write_config(out, cfg)
    return 0


def cmd_fuse(args, cfg: PipelineConfig) -> int:
    frames_dir, depth_dir = Path(args.frames), Path(args.depth)
    names, poses = load_frames(frames_dir)
    names = [n for n in names if (depth_dir / f"{n}.pfm").is_file()]
    if not names:
        raise UsageError(f"{depth_dir}: no depth maps matching the frames in {frames_dir}")
    depths = [DepthMap.from_array(read_pfm(depth_dir / f"{n}.pfm")) for n in names]
    colors = [_read_required(frames_dir / f"{n}.png", read_image) for n in names]
    grid, mesh = fuse_frames(depths, colors, [poses[n] for n in names], cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(out / GRID_FILE, grid)
    export_ply(mesh, out / MESH_FILE)
    write_config(out, cfg)
    print(f"fused {len(names)} frames into {'x'.join(map(str, grid.dims))} voxels, "
          f"{len(mesh)} triangles")
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    kind = args.kind or ("mesh" if pred.suffix.lower() == ".ply" else "depth")
    if kind == "depth":
        p = DepthMap.from_array(_read_required(pred, read_pfm))
        g = DepthMap.from_array(_read_required(gt, read_pfm))
        report = report_dict(depth=depth_metrics(p, align_gt(p, g)))
    else:
        m = mesh_metrics(_read_required(pred, read_ply), _read_required(gt, read_ply),
                         cfg.fscore_cm, cfg.n_samples, cfg.seed)
        report = report_dict(mesh=m)
    sys.stdout.write(report_text(report))
    if args.json:
        Path(args.json).write_text(report_json(report))
    return 0


def cmd_pipeline(args, cfg: PipelineConfig) -> int:
    spec = load_scene(args.scene)
    out = Path(args.out)
    frames_dir, depth_dir, fusion_dir = out / "frames", out / "depth", out / "fusion"
    for d in (frames_dir, depth_dir, fusion_dir):
        d.mkdir(parents=True, exist_ok=True)
    write_config(out, cfg)

    frames = [render(spec, i) for i in range(len(spec.trajectory))]
    if len(frames) < 2:
        raise UsageError("the pipeline needs at least two frames")
    names = [frame_name(i) for i in range(len(frames))]
    for name, f in zip(names, frames):
        write_image(frames_dir / f"{name}.png", f.image)
        write_pfm(frames_dir / f"{name}.pfm", f.depth.depth)
    write_poses(frames_dir / "poses.txt", dict(zip(names, (f.pose for f in frames))))
    reference_mesh = gt_mesh(spec)
    export_ply(reference_mesh, frames_dir / GT_MESH_FILE)

    images = [f.image for f in frames]
    poses = [f.pose for f in frames]
    preds = []
    for ref in range(len(frames)):
        srcs = [i for i in range(len(frames)) if i != ref]
        depth, conf = estimate_depth(images, poses, ref, srcs, cfg)
        # round-trip through float32 so fusion sees exactly what is on disk
        write_pfm(depth_dir / f"{names[ref]}.pfm", depth.depth)
        write_pfm(depth_dir / f"{names[ref]}.conf.pfm", conf)
        preds.append(DepthMap.from_array(read_pfm(depth_dir / f"{names[ref]}.pfm")))
        log.info("depth for %s done", names[ref])

    grid, mesh = fuse_frames(preds, images, poses, cfg)
    save_grid(fusion_dir / GRID_FILE, grid)
    export_ply(mesh, fusion_dir / MESH_FILE)

    dm = pooled_depth_metrics(preds, [f.depth for f in frames])
    mm = mesh_metrics(mesh, reference_mesh, cfg.fscore_cm, cfg.n_samples, cfg.seed) \
        if not mesh.is_empty else None
    if mm is None:
        log.warning("fused mesh is empty; mesh metrics skipped")
    report = report_dict(depth=dm, mesh=mm)
    (out / "metrics.json").write_text(report_json(report))
    (out / "metrics.txt").write_text(report_text(report))
    sys.stdout.write(report_text(report))
    return 0


# --- argument parsing ----------------------------------------------------

def _parse_set(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", dest="overrides", action="append", type=_parse_set, default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--seed", type=int, help="seed for mesh surface sampling")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="erprecon",
                                     description="Multi-view depth, TSDF fusion and evaluation "
                                                 "for equirectangular 360-degree images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[common], help="ray-cast a scene file into frames")
    p.add_argument("scene")
    p.add_argument("out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("depth", parents=[common], help="estimate depth by spherical sweeping")
    p.add_argument("frames", help="frame directory with poses.txt and PNG images")
    p.add_argument("--ref", type=int, help="reference frame index (default: every frame)")
    p.add_argument("--src", type=int, nargs="+", help="source frame indices (default: all others)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("fuse", parents=[common], help="fuse depth maps into a TSDF and mesh")
    p.add_argument("frames")
    p.add_argument("depth", help="directory of <frame>.pfm depth maps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="compare depth maps or meshes")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--kind", choices=("depth", "mesh"), help="default: by file extension")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="render, depth, fuse and eval a scene")
    p.add_argument("scene")
    p.add_argument("out")
    p.set_defaults(func=cmd_pipeline)
    return parser


def resolve_config(args) -> PipelineConfig:
    overrides = dict(args.overrides)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError, SceneError) as exc:
        print(f"erprecon {args.command}: {exc}", file=sys.stderr)
        return 2
    except (MetricError, ValueError, OSError) as exc:
        print(f"erprecon {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
