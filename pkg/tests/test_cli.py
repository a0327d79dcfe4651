import json
import shutil

import numpy as np
import pytest

from posefree.cli import main
from posefree.geometry import epipolar_distance
from posefree.imaging import read_png
from posefree.matching import read_flo
from posefree.scenedir import read_scene_dir
from posefree.synth import Camera, Scene, gt_flow_at

SIZE = ["--image-size", "64"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", "--seed", "2", "--frames", "3", "--out", str(root), *SIZE]) == 0
    return root


def run_json(argv, capsys):
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out)


# -- synth ----------------------------------------------------------------------


def test_synth_layout(scene):
    assert (scene / "cameras.txt").exists() and (scene / "oracle.json").exists()
    sd = read_scene_dir(scene)
    assert len(sd) == 3 and read_png(sd.image_path(0)).shape == (64, 64, 3)


# -- estimate -------------------------------------------------------------------


def test_estimate_artifacts(scene, tmp_path, capsys):
    res = run_json(["estimate", str(scene), "--out", str(tmp_path), *SIZE], capsys)
    assert res["pose_source"] == "estimated"
    for name in ("pose.json", "flow.flo", "mask.png", "epipolar.png", "epipolar.json"):
        assert (tmp_path / name).exists()
    flow = read_flo(tmp_path / "flow.flo")
    assert flow.shape == (64, 64) and np.all(np.isfinite(flow.data))
    R = np.reshape(res["estimated"]["R"], (3, 3))
    assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9


def test_epipolar_lines_with_gt_pose(scene, tmp_path, capsys):
    run_json(["estimate", str(scene), "--use-gt-pose", "--out", str(tmp_path), *SIZE], capsys)
    doc = json.loads((tmp_path / "epipolar.json").read_text())
    assert doc["pose_source"] == "gt"
    sd, geo = read_scene_dir(scene), Scene.load(scene)
    c1, c2 = (Camera(f.k, f.pose, 64, 64) for f in (sd.frames[0], sd.frames[2]))
    pts = np.asarray(doc["points"])
    flow = gt_flow_at(geo, c1, c2, pts)
    hit = np.all(np.isfinite(flow), axis=-1)
    assert hit.sum() >= len(pts) // 2
    dist = epipolar_distance(pts[hit] + flow[hit], np.asarray(doc["lines"])[hit])
    assert dist.max() <= 2.0


def test_identical_pair_near_zero_flow(scene, tmp_path, capsys):
    run_json(["estimate", str(scene), "--pair", "0", "0", "--out", str(tmp_path), *SIZE], capsys)
    assert np.abs(read_flo(tmp_path / "flow.flo").data).max() <= 1e-6


def test_missing_cameras_names_file(scene, tmp_path, caplog):
    broken = tmp_path / "broken"
    shutil.copytree(scene, broken)
    (broken / "cameras.txt").unlink()
    code = main(["estimate", str(broken), "--out", str(tmp_path / "o"), *SIZE])
    assert code != 0 and "cameras.txt" in caplog.text


def test_bad_pair_index(scene, tmp_path):
    assert main(["estimate", str(scene), "--pair", "0", "7", "--out", str(tmp_path), *SIZE]) != 0


# -- render ---------------------------------------------------------------------


def test_render_gt_oracle(scene, tmp_path, capsys):
    res = run_json(["render", str(scene), "--use-gt-pose", "--oracle-scoring",
                    "--out", str(tmp_path), *SIZE], capsys)
    assert res["pose_source"] == "gt" and res["scoring"] == "oracle"
    assert res["psnr"] >= 40.0
    assert (tmp_path / "losses.json").exists() and (tmp_path / "depth.png").exists()


def test_render_without_target_image(scene, tmp_path, capsys):
    blind = tmp_path / "blind"
    shutil.copytree(scene, blind)
    sd = read_scene_dir(blind)
    full = run_json(["render", str(scene), "--use-gt-pose", "--oracle-scoring",
                     "--out", str(tmp_path / "a"), *SIZE], capsys)
    sd.image_path(1).unlink()
    res = run_json(["render", str(blind), "--use-gt-pose", "--oracle-scoring",
                    "--out", str(tmp_path / "b"), *SIZE], capsys)
    assert "psnr" not in res and not (tmp_path / "b" / "losses.json").exists()
    assert full["valid_fraction"] == res["valid_fraction"]
    a, b = (read_png(tmp_path / d / "render.png") for d in "ab")
    assert np.array_equal(a, b)


def test_render_estimated_pose_structural(scene, tmp_path, capsys):
    res = run_json(["render", str(scene), "--out", str(tmp_path), *SIZE], capsys)
    assert res["pose_source"] == "estimated" and np.isfinite(res["psnr"])
    assert np.all(np.isfinite(read_png(tmp_path / "render.png")))


def test_pose_source_toggles_output(scene, tmp_path, capsys):
    run_json(["render", str(scene), "--oracle-scoring", "--out", str(tmp_path / "e"), *SIZE], capsys)
    run_json(["render", str(scene), "--oracle-scoring", "--use-gt-pose",
              "--out", str(tmp_path / "g"), *SIZE], capsys)
    e, g = (read_png(tmp_path / d / "render.png") for d in "eg")
    assert not np.array_equal(e, g)


# -- eval -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    for i, baseline in enumerate((0.1, 1.4)):
        main(["synth", "--seed", str(i + 1), "--frames", "3", "--baseline", str(baseline),
              "--pullback", "0.6", "--out", str(root / f"s{i}"), *SIZE])
    (root / "zz_broken").mkdir()
    (root / "zz_broken" / "cameras.txt").write_text("not a camera line\n")
    return root


def test_eval_skips_malformed(corpus, tmp_path, capsys):
    assert main(["eval", str(corpus), "--out", str(tmp_path), *SIZE]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert [s["scene"] for s in report["skipped"]] == ["zz_broken"]
    assert len(report["records"]) == 2
    for name in ("records.csv", "summary.csv", "overlap_splits.png", "metrics.png"):
        assert (tmp_path / name).exists()


def test_eval_jobs_match_serial(corpus, tmp_path):
    assert main(["eval", str(corpus), "--out", str(tmp_path / "a"), *SIZE]) == 0
    assert main(["eval", str(corpus), "--jobs", "2", "--out", str(tmp_path / "b"), *SIZE]) == 0
    for f in ("records.csv", "summary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_all_fail(tmp_path):
    (tmp_path / "root" / "bad").mkdir(parents=True)
    assert main(["eval", str(tmp_path / "root"), "--out", str(tmp_path / "o"), *SIZE]) != 0


# -- check ----------------------------------------------------------------------


def test_check_passes(tmp_path, capsys):
    doc = run_json(["check", "--out", str(tmp_path)], capsys)
    assert doc["passed"] and not doc["failed"]
    assert (tmp_path / "check.json").exists()


def test_check_tau_zero(tmp_path, capsys):
    doc = run_json(["check", "--tau", "0", "--out", str(tmp_path)], capsys)
    names = {c["name"]: c["ok"] for c in doc["checks"]}
    assert doc["passed"] and names["matching.mask_monotone"]


def test_check_corrupt_blob(tmp_path, capsys):
    from posefree.config import Config
    from posefree.pipeline import PipelineState

    wd = tmp_path / "w"
    PipelineState.from_config(Config()).save_weights(wd)
    data = (wd / "posehead.bin").read_bytes()
    (wd / "posehead.bin").write_bytes(data[:-1] + bytes([data[-1] ^ 0xFF]))
    assert main(["check", "--weights-dir", str(wd), "--out", str(tmp_path)]) == 1
    doc = json.loads(capsys.readouterr().out)
    assert doc["failed"] == ["weights.head"]
