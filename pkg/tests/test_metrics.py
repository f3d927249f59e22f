import json
from dataclasses import replace

import numpy as np
import pytest

from erprecon.camera import ErpIntrinsics, Pose
from erprecon.metrics import (
    DEPTH_KEYS,
    MESH_KEYS,
    LossWeights,
    MetricError,
    SourceView,
    depth_metrics,
    losses,
    mesh_metrics,
    report_dict,
    report_json,
    report_text,
    sample_surface,
)
from erprecon.mesh import TriangleMesh
from erprecon.sweep import DepthMap
from erprecon.synth import Box, parse_scene, render, rotation_from_angles


def cube(size=1.0, center=(0.0, 0.0, 0.0)):
    return Box(center, (size,) * 3).mesh()


class TestDepthMetrics:
    def test_three_pixel_hand_case(self):
        m = depth_metrics(np.array([[1.1, 2.0, 5.0]]), np.array([[1.0, 2.0, 4.0]]))
        assert m.mae_cm == pytest.approx(110.0 / 3)
        assert m.mre_pct == pytest.approx(100.0 * (0.1 + 0.0 + 0.25) / 3)
        assert m.rmse_cm == pytest.approx(100.0 * np.sqrt((0.01 + 1.0) / 3))
        # 5 / 4 sits exactly on the threshold, which is strict
        assert m.delta1_pct == pytest.approx(200.0 / 3)
        assert m.count == 3

    def test_scaled_prediction(self, rng):
        gt = rng.uniform(0.5, 5.0, size=(8, 16))
        m = depth_metrics(1.2 * gt, gt)
        assert m.mre_pct == pytest.approx(20.0)
        assert m.delta1_pct == 100.0

    def test_self(self, rng):
        gt = rng.uniform(0.5, 5.0, size=(8, 16))
        m = depth_metrics(gt, gt)
        assert (m.mae_cm, m.mre_pct, m.rmse_cm, m.delta1_pct) == (0.0, 0.0, 0.0, 100.0)

    def test_only_joint_pixels(self):
        gt = np.array([[1.0, np.nan, 2.0, 3.0]])
        pred = np.array([[1.0, 5.0, np.nan, 4.0]])
        m = depth_metrics(pred, gt)
        assert m.count == 2 and m.mae_cm == pytest.approx(50.0)

    def test_accepts_depth_map(self):
        d = DepthMap.from_array(np.full((4, 8), 2.0))
        assert depth_metrics(d, d).count == 32

    def test_no_overlap(self):
        with pytest.raises(MetricError):
            depth_metrics(np.array([[np.nan, 1.0]]), np.array([[1.0, np.nan]]))

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            depth_metrics(np.ones((4, 8)), np.ones((4, 4)))


class TestMeshMetrics:
    def test_self_eval(self):
        m = mesh_metrics(cube(), cube(), n_samples=20000)
        assert m.chamfer_cm == 0.0 and m.fscore_pct == 100.0

    def test_symmetry(self):
        a, b = cube(), cube(1.1, (0.02, 0.0, 0.0))
        ab = mesh_metrics(a, b, n_samples=20000, seed=3)
        ba = mesh_metrics(b, a, n_samples=20000, seed=3)
        assert ab.acc_cm == ba.comp_cm and ab.comp_cm == ba.acc_cm
        assert ab.chamfer_cm == ba.chamfer_cm

    def test_dilated_cube(self):
        # every face moved out by 1 cm: both directions are ~1 cm everywhere
        m = mesh_metrics(cube(1.02), cube(), n_samples=100_000)
        assert m.chamfer_cm == pytest.approx(1.0, rel=0.15)
        assert m.fscore_pct == 100.0

    def test_threshold_splits(self):
        # 3 cm dilation: inside a 5 cm threshold, outside a 2 cm one
        # a few samples near the edges land just past 5 cm
        assert mesh_metrics(cube(1.06), cube(), 5.0, n_samples=20000).fscore_pct >= 99.5
        assert mesh_metrics(cube(1.06), cube(), 2.0, n_samples=20000).fscore_pct == 0.0

    def test_chamfer_is_mean(self):
        m = mesh_metrics(cube(1.1), cube(), n_samples=20000)
        assert m.chamfer_cm == (m.acc_cm + m.comp_cm) / 2
        assert 0.0 <= m.fscore_pct <= 100.0

    def test_seeded(self):
        a = sample_surface(cube(), 1000, seed=5)
        np.testing.assert_array_equal(a, sample_surface(cube(), 1000, seed=5))

    def test_samples_on_surface(self):
        p = sample_surface(cube(), 5000)
        assert np.allclose(np.max(np.abs(p), axis=1), 0.5)

    def test_area_weighted(self):
        big = TriangleMesh([[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]],
                           [[0, 1, 2], [3, 4, 5]])
        p = sample_surface(big, 40000)
        assert np.mean(p[:, 0] < 5) == pytest.approx(0.75, abs=0.01)

    def test_empty(self):
        with pytest.raises(MetricError):
            mesh_metrics(TriangleMesh(), cube())

    def test_bad_threshold(self):
        with pytest.raises(MetricError):
            mesh_metrics(cube(), cube(), threshold_cm=0.0)


ROOM = """
resolution 128 64
room {cx} 0 0  {sx} 4 4  checker 0.3
camera  0 0 0
camera  0.3 0.1 -0.2  30 0 0
camera -0.2 0.2 0.25  -20 10 5
"""


@pytest.fixture(scope="module")
def room():
    spec = parse_scene(ROOM.format(cx=0, sx=4))
    return [render(spec, i) for i in range(3)]


def pyramid(d, levels=3):
    out = [d]
    for _ in range(levels - 1):
        out.append(DepthMap.from_array(out[-1].depth[::2, ::2]))
    return out


class TestLosses:
    def test_doubled_prediction(self, room):
        gt = pyramid(room[0].depth)
        pred = [DepthMap.from_array(2 * g.depth) for g in gt]
        out = losses(pred, gt)
        assert abs(out.depth - np.log(2)) <= 1e-9
        assert abs(out.grad) <= 1e-12
        # scaling radial depth leaves the surface orientation unchanged
        assert abs(out.normals) <= 1e-9

    def test_self_is_zero(self, room):
        gt = pyramid(room[0].depth)
        out = losses(gt, gt)
        assert out.depth == 0 and out.grad == 0
        # unit normals dotted with themselves miss 1 by rounding only
        assert abs(out.normals) <= 1e-12 and abs(out.total) <= 1e-12

    def test_total_is_weighted_sum(self, room, rng):
        gt = pyramid(room[0].depth)
        pred = [DepthMap.from_array(g.depth * rng.uniform(0.9, 1.1, g.shape)) for g in gt]
        src = [SourceView(f.depth, f.pose) for f in room[1:]]
        w = LossWeights(0.5, 2.0, 0.3)
        out = losses(pred, gt, room[0].pose, src, w)
        expect = out.depth + 0.5 * out.grad + 2.0 * out.normals + 0.3 * out.mv
        assert abs(out.total - expect) <= 1e-9
        doubled = losses(pred, gt, room[0].pose, src, replace(w, mv=0.6))
        assert abs((doubled.total - out.total) - 0.3 * out.mv) <= 1e-9

    def test_grad_sees_local_error(self):
        g = np.full((8, 16), 2.0)
        p = g.copy()
        p[4, 4] = 3.0
        out = losses([p], [g])
        assert out.grad > 0

    def test_normals_see_tilt(self, room):
        gt = room[0].depth
        tilt = gt.depth * (1.0 + 0.2 * np.linspace(0, 1, gt.shape[1]))[None, :]
        assert losses([tilt], [gt]).normals > 0.001

    def test_mv_exact_under_pixel_yaw(self):
        # sources at the reference center, yawed by whole pixel columns
        intr = ErpIntrinsics(64, 32)
        spec = parse_scene("resolution 64 32\nroom 0.1 0 -0.2 4 3 5 checker 0.3\ncamera 0 0 0\n")
        ref = render(spec, 0)
        sources = []
        for k in (3, -7):
            yaw = 360.0 * k / intr.width
            spec.trajectory.append(Pose.from_camera_center(rotation_from_angles(yaw, 0, 0), [0, 0, 0]))
            f = render(spec, len(spec.trajectory) - 1)
            sources.append(SourceView(f.depth, f.pose))
        out = losses([ref.depth], [ref.depth], ref.pose, sources)
        assert out.mv <= 1e-9

    def test_mv_room(self, room):
        src = [SourceView(f.depth, f.pose) for f in room[1:]]
        exact = losses([room[0].depth], [room[0].depth], room[0].pose, src).mv
        # the +x wall brought 10 cm closer to the reference camera
        moved = render(parse_scene(ROOM.format(cx=-0.05, sx=3.9)), 0).depth
        perturbed = losses([moved], [room[0].depth], room[0].pose, src).mv
        assert exact < 1e-3
        assert perturbed > 5 * exact

    def test_mv_skips_occluded(self, room):
        # pushing a wall away hides the prediction behind the source surfaces
        src = [SourceView(f.depth, f.pose) for f in room[1:]]
        exact = losses([room[0].depth], [room[0].depth], room[0].pose, src).mv
        pushed = render(parse_scene(ROOM.format(cx=0.05, sx=4.1)), 0).depth
        assert losses([pushed], [room[0].depth], room[0].pose, src).mv < 2 * exact

    def test_errors(self, room):
        gt = pyramid(room[0].depth)
        with pytest.raises(MetricError):
            losses(gt[:2], gt)
        with pytest.raises(MetricError):
            losses(gt[::-1], gt)
        with pytest.raises(MetricError):
            losses(gt, gt, sources=[SourceView(room[1].depth, room[1].pose)])


class TestReports:
    @pytest.fixture
    def report(self):
        d = depth_metrics(np.array([[1.1, 2.0, 5.0]]), np.array([[1.0, 2.0, 4.0]]))
        m = mesh_metrics(cube(1.02), cube(), n_samples=5000)
        return report_dict(d, m)

    def test_json_keys(self, report):
        doc = json.loads(report_json(report))
        assert tuple(doc) == DEPTH_KEYS + MESH_KEYS

    def test_text_lines(self, report):
        lines = report_text(report).splitlines()
        assert [ln.split("=")[0] for ln in lines] == list(DEPTH_KEYS + MESH_KEYS)
        assert lines[0] == f"mae_cm={110.0 / 3:.6f}"

    @pytest.mark.parametrize("which", ["depth", "mesh"])
    def test_partial(self, report, which):
        d = depth_metrics(np.ones((2, 2)), np.ones((2, 2)))
        m = mesh_metrics(cube(), cube(), n_samples=1000)
        part = report_dict(depth=d) if which == "depth" else report_dict(mesh=m)
        assert tuple(part) == (DEPTH_KEYS if which == "depth" else MESH_KEYS)
