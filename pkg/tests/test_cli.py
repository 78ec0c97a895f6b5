import json
import math

import numpy as np
import pytest

from bevlandmarks import io as fio
from bevlandmarks.cli import main
from bevlandmarks.geometry import Pose2

TINY = ["--width-px", "16", "--height-px", "16", "--pixel-size", "1.0", "--voxel-size", "0.2"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--preset", "rooms", "--seed", "7", "--out", str(out), "--spacing", "2.0",
                 "--queries", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    argv = ["train", "--trajectory", str(synth_dir / "trajectory.txt"), "--scans", str(synth_dir / "scans"),
            "--out", str(d / "m.bsld"), "--epochs", "1", "--d-p", "2", "--val-fraction", "0.1",
            "--summary", str(d / "summary.json"), "--log", str(d / "log.txt")] + TINY
    assert main(argv) == 0
    return d


def test_synth_writes_scene_trajectory_and_scans(synth_dir):
    traj = fio.read_trajectory(synth_dir / "trajectory.txt")
    scans = sorted((synth_dir / "scans").iterdir())
    assert (synth_dir / "scene.txt").exists()
    assert len(traj) == len(scans) > 10
    assert len(fio.read_trajectory(synth_dir / "queries_gt.txt")) == 2
    assert fio.read_cloud(scans[0]).shape[1] == 3


def test_synth_is_deterministic(synth_dir, tmp_path):
    assert main(["synth", "--preset", "rooms", "--seed", "7", "--out", str(tmp_path), "--spacing", "2.0",
                 "--queries", "2"]) == 0
    for rel in ("scene.txt", "trajectory.txt", "queries_gt.txt", "scans/ref00003.bin", "queries/q0001.bin"):
        assert (tmp_path / rel).read_bytes() == (synth_dir / rel).read_bytes(), rel


def test_bev_dump(synth_dir, tmp_path, capsys):
    assert main(["bev", "--cloud", str(synth_dir / "scans" / "ref00000.bin"), "--out", str(tmp_path / "b.pgm"),
                 "--coords", str(tmp_path / "c.npy"), "--pose", "1", "2", "0"]) == 0
    img = fio.read_pgm(tmp_path / "b.pgm")
    assert img.shape == (64, 64) and img.max() == 255
    coords = np.load(tmp_path / "c.npy")
    assert coords.shape == (2, 64, 64)
    assert coords[0, 0, 32] == pytest.approx(1.0 + 0.125)
    assert "occupied" in capsys.readouterr().out


def test_init_landmarks(synth_dir, tmp_path):
    assert main(["init-landmarks", "--trajectory", str(synth_dir / "trajectory.txt"),
                 "--out", str(tmp_path / "lm.txt")]) == 0
    assert len((tmp_path / "lm.txt").read_text().split("\n")) > 3


def test_train_outputs(trained):
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["epochs"] == 1
    assert len((trained / "log.txt").read_text().splitlines()) == 1


def test_inspect_bundle(trained, capsys):
    assert main(["inspect-bundle", "--bundle", str(trained / "m.bsld")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["landmarks"] == info["model"]["num_landmarks"]
    assert info["param_count"] > 0 and not info["has_optimizer_state"]


def test_localize_and_eval(trained, synth_dir, tmp_path, capsys):
    res = tmp_path / "r.txt"
    assert main(["localize", "--bundle", str(trained / "m.bsld"), "--scans", str(synth_dir / "queries"),
                 "--ids", str(synth_dir / "queries_gt.txt"), "--out", str(res)]) == 0
    lines = res.read_text().splitlines()
    assert [l.split()[0] for l in lines] == ["q0000", "q0001"]
    assert all(len(l.split()) == 8 for l in lines)
    assert main(["eval", "--results", str(res), "--gt", str(synth_dir / "queries_gt.txt"),
                 "--reference", str(synth_dir / "trajectory.txt")]) == 0
    assert "SR=" in capsys.readouterr().out


def test_localize_single_cloud_to_stdout(trained, synth_dir, capsys):
    assert main(["localize", "--bundle", str(trained / "m.bsld"),
                 "--cloud", str(synth_dir / "queries" / "q0000.bin")]) == 0
    assert capsys.readouterr().out.startswith("q0000 ")


def test_eval_all_exact(tmp_path, capsys):
    poses = [("a", Pose2(1, 2, 0.1)), ("b", Pose2(-3, 4, 2.0))]
    fio.write_trajectory(tmp_path / "gt.txt", poses)
    (tmp_path / "r.txt").write_text("".join(
        f"{fid} OK {p.x} {p.y} {math.degrees(p.yaw)} 10 12 0.0\n" for fid, p in poses))
    assert main(["eval", "--results", str(tmp_path / "r.txt"), "--gt", str(tmp_path / "gt.txt")]) == 0
    assert "SR=100.00" in capsys.readouterr().out


def test_eval_missing_frame_is_error(tmp_path, capsys):
    fio.write_trajectory(tmp_path / "gt.txt", [("a", Pose2(0, 0, 0))])
    (tmp_path / "r.txt").write_text("")
    assert main(["eval", "--results", str(tmp_path / "r.txt"), "--gt", str(tmp_path / "gt.txt")]) != 0
    assert "error" in capsys.readouterr().err


def test_demo_transfer(trained, tmp_path, capsys):
    assert main(["demo-transfer", "--bundle", str(trained / "m.bsld"), "--preset", "pillars",
                 "--spacing", "4.0", "--stride", "20", "--out", str(tmp_path)]) == 0
    assert list(tmp_path.glob("*_heat.pgm"))
    assert "median distance" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--bogus"], ["synth"], []])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_file_is_nonzero(tmp_path, capsys):
    assert main(["localize", "--bundle", str(tmp_path / "none.bsld"), "--cloud", str(tmp_path / "x.bin")]) == 1
    assert "error" in capsys.readouterr().err
