import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from erprecon.cli import main
from erprecon.io import read_pfm, write_pfm
from erprecon.mesh import read_ply

SCENE = """\
resolution 64 32
room 0 0 0  4 3 4  checker 0.4 0.5 2 7
camera  0 0.1 0
camera  0.3 0.05 0.15  20 0 0
"""

FAST = ["--set", "n_planes=16", "--set", "n_samples=5000"]


@pytest.fixture
def scene(tmp_path):
    path = tmp_path / "room.scene"
    path.write_text(SCENE)
    return path


@pytest.fixture
def frames(tmp_path, scene):
    out = tmp_path / "frames"
    assert main(["render", str(scene), str(out)]) == 0
    return out


class TestRender:
    def test_outputs(self, frames):
        names = sorted(p.name for p in frames.iterdir())
        assert names == ["config.txt", "frame_000.pfm", "frame_000.png", "frame_001.pfm",
                         "frame_001.png", "gt_mesh.ply", "poses.txt"]
        assert read_pfm(frames / "frame_000.pfm").shape == (32, 64)
        lines = (frames / "poses.txt").read_text().splitlines()
        assert len([ln for ln in lines if not ln.startswith("#")]) == 2

    def test_deterministic(self, tmp_path, scene, frames):
        again = tmp_path / "again"
        assert main(["render", str(scene), str(again)]) == 0
        for name in ("frame_000.pfm", "frame_001.pfm", "gt_mesh.ply", "poses.txt"):
            assert (frames / name).read_bytes() == (again / name).read_bytes()

    def test_missing_spec(self, tmp_path, capsys):
        assert main(["render", str(tmp_path / "nope.scene"), str(tmp_path / "o")]) == 2
        assert "nope.scene" in capsys.readouterr().err

    def test_bad_spec(self, tmp_path):
        bad = tmp_path / "bad.scene"
        bad.write_text("room 0 0 0 4 4 4\ncamera 9 9 9\n")
        assert main(["render", str(bad), str(tmp_path / "o")]) == 2


class TestDepth:
    def test_writes_depth_and_confidence(self, tmp_path, frames):
        out = tmp_path / "depth"
        assert main(["depth", str(frames), "--ref", "0", "--src", "1", "--out", str(out), *FAST]) == 0
        d = read_pfm(out / "frame_000.pfm")
        c = read_pfm(out / "frame_000.conf.pfm")
        assert d.shape == c.shape == (16, 32)
        assert np.all((c > 0) & (c <= 1))
        assert "n_planes = 16" in (out / "config.txt").read_text()

    def test_zero_baseline_warns(self, tmp_path, caplog):
        scene = tmp_path / "spin.scene"
        scene.write_text("resolution 64 32\nroom 0 0 0 4 3 4 checker 0.4\ncamera 0 0 0\ncamera 0 0 0 30 0 0\n")
        assert main(["render", str(scene), str(tmp_path / "f")]) == 0
        with caplog.at_level(logging.WARNING, logger="erprecon"):
            code = main(["depth", str(tmp_path / "f"), "--ref", "0", "--out", str(tmp_path / "d"), *FAST])
        assert code == 0
        assert any("zero baseline" in r.message for r in caplog.records)

    def test_missing_frames(self, tmp_path):
        assert main(["depth", str(tmp_path), "--out", str(tmp_path / "d")]) == 2

    def test_bad_index(self, tmp_path, frames):
        assert main(["depth", str(frames), "--ref", "5", "--out", str(tmp_path / "d")]) == 2


class TestFuseAndEval:
    def test_fuse_ground_truth(self, tmp_path, capsys):
        # 64 px panoramas are too coarse for 5 cm accuracy; render this one finer
        scene = tmp_path / "fine.scene"
        scene.write_text(SCENE.replace("resolution 64 32", "resolution 256 128"))
        frames = tmp_path / "fine"
        assert main(["render", str(scene), str(frames)]) == 0
        out = tmp_path / "fusion"
        assert main(["fuse", str(frames), str(frames), "--out", str(out)]) == 0
        assert not read_ply(out / "mesh.ply").is_empty
        assert (out / "grid.tsdf").read_bytes().startswith(b"TSDF ")
        capsys.readouterr()
        report = tmp_path / "m.json"
        assert main(["eval", str(out / "mesh.ply"), str(frames / "gt_mesh.ply"),
                     "--json", str(report)]) == 0
        assert json.loads(report.read_text())["fscore_pct"] >= 90.0

    def test_fuse_single_frame(self, tmp_path, frames):
        depth = tmp_path / "one"
        depth.mkdir()
        (depth / "frame_001.pfm").write_bytes((frames / "frame_001.pfm").read_bytes())
        assert main(["fuse", str(frames), str(depth), "--out", str(tmp_path / "o")]) == 0
        assert not read_ply(tmp_path / "o" / "mesh.ply").is_empty

    def test_fuse_without_depth(self, tmp_path, frames):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["fuse", str(frames), str(empty), "--out", str(tmp_path / "o")]) == 2

    def test_eval_depth_self(self, frames, capsys):
        path = str(frames / "frame_000.pfm")
        assert main(["eval", path, path]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines == ["mae_cm=0.000000", "mre_pct=0.000000", "rmse_cm=0.000000",
                         "delta1_pct=100.000000"]

    def test_eval_mesh_self(self, frames, capsys):
        path = str(frames / "gt_mesh.ply")
        assert main(["eval", path, path, "--set", "n_samples=5000"]) == 0
        assert "fscore_pct=100.000000" in capsys.readouterr().out.splitlines()

    def test_eval_hand_case(self, tmp_path, capsys):
        write_pfm(tmp_path / "p.pfm", np.array([[1.1, 2.0, 5.0]]))
        write_pfm(tmp_path / "g.pfm", np.array([[1.0, 2.0, 4.0]]))
        assert main(["eval", str(tmp_path / "p.pfm"), str(tmp_path / "g.pfm"),
                     "--json", str(tmp_path / "r.json")]) == 0
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["mae_cm"] == pytest.approx(110 / 3, abs=1e-4)
        assert doc["delta1_pct"] == pytest.approx(200 / 3)

    def test_eval_gt_at_higher_resolution(self, tmp_path, capsys):
        gt = np.arange(1, 33, dtype=np.float64).reshape(4, 8)
        write_pfm(tmp_path / "p.pfm", gt[::2, ::2])
        write_pfm(tmp_path / "g.pfm", gt)
        assert main(["eval", str(tmp_path / "p.pfm"), str(tmp_path / "g.pfm")]) == 0
        assert capsys.readouterr().out.startswith("mae_cm=0.000000")

    def test_eval_no_overlap(self, tmp_path):
        write_pfm(tmp_path / "p.pfm", np.array([[np.nan, 1.0]]))
        write_pfm(tmp_path / "g.pfm", np.array([[1.0, np.nan]]))
        assert main(["eval", str(tmp_path / "p.pfm"), str(tmp_path / "g.pfm")]) == 1

    def test_eval_missing(self, tmp_path):
        assert main(["eval", str(tmp_path / "a.pfm"), str(tmp_path / "b.pfm")]) == 2


class TestConfigHandling:
    def test_flags_win(self, tmp_path, frames):
        cfg = tmp_path / "c.txt"
        cfg.write_text("n_planes = 32\nthreads = 2\nmedian = false\n")
        out = tmp_path / "d"
        assert main(["depth", str(frames), "--ref", "1", "--out", str(out), "--config", str(cfg),
                     "--set", "n_planes=8", "--threads", "3"]) == 0
        echo = (out / "config.txt").read_text().splitlines()
        assert "n_planes = 8" in echo and "threads = 3" in echo and "median = false" in echo

    def test_bad_config_value(self, tmp_path, frames):
        assert main(["depth", str(frames), "--out", str(tmp_path / "d"), "--set", "n_planes=x"]) == 2

    def test_bad_set_syntax(self, tmp_path, frames):
        with pytest.raises(SystemExit) as exc:
            main(["depth", str(frames), "--out", str(tmp_path / "d"), "--set", "n_planes"])
        assert exc.value.code == 2

    def test_no_command(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2


def test_pipeline(tmp_path, scene):
    out = tmp_path / "run"
    assert main(["pipeline", str(scene), str(out), *FAST, "--set", "voxel_size=0.1"]) == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert list(doc) == ["mae_cm", "mre_pct", "rmse_cm", "delta1_pct",
                         "comp_cm", "acc_cm", "chamfer_cm", "fscore_pct"]
    assert (out / "metrics.txt").read_text().splitlines()[0].startswith("mae_cm=")
    for sub in ("frames/poses.txt", "depth/frame_001.pfm", "fusion/mesh.ply", "config.txt"):
        assert (out / sub).is_file()


def test_module_entry_point(tmp_path, scene):
    proc = subprocess.run([sys.executable, "-m", "erprecon.cli", "render", str(scene),
                           str(tmp_path / "f")], capture_output=True, text=True)
    assert proc.returncode == 0 and "rendered 2 frames" in proc.stdout
