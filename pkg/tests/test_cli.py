import json
import subprocess
import sys

import numpy as np
import pytest

from iivm import cli, data, modelio


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert cli.main(["synth", "--out", str(d), "--height", "32", "--width", "32", "--seed", "4"]) == 0
    return d


@pytest.fixture(scope="module")
def model_dir(scene_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--cube", str(scene_dir / "cube.bin"), "--labels",
                     str(scene_dir / "labels.pgm"), "--out", str(d)]) == 0
    return d


def test_synth_outputs_and_manifest(scene_dir, tmp_path):
    for f in ("cube.bin", "cube.bin.names", "labels.pgm", "truth.pgm", "manifest.json"):
        assert (scene_dir / f).exists()
    man = json.loads((scene_dir / "manifest.json").read_text())
    assert man["scene"]["separation"] == 2.5 and man["seed"] == 4
    assert "config_sha256" in man and "numpy" in man["versions"]
    cli.main(["synth", "--out", str(tmp_path), "--height", "32", "--width", "32", "--seed", "4"])
    for f in ("cube.bin", "labels.pgm", "truth.pgm", "manifest.json"):
        assert (tmp_path / f).read_bytes() == (scene_dir / f).read_bytes()


def test_train_log_matches_model(model_dir):
    log = json.loads((model_dir / "train_log.json").read_text())
    model = modelio.load(model_dir / "model.ivm")
    assert log["V"] == model.V and log["N"] == 30
    assert "train_sec" in log


def test_predict_probabilities_and_labels(scene_dir, model_dir, tmp_path):
    assert cli.main(["predict", "--model", str(model_dir / "model.ivm"), "--cube",
                     str(scene_dir / "cube.bin"), "--out", str(tmp_path), "--beta", "1"]) == 0
    P = data.read_cube(tmp_path / "probs.bin")
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-6)
    lab = data.read_labels(tmp_path / "labels.pgm")
    np.testing.assert_array_equal(lab, np.argmax(P, axis=2) + 1)
    assert (tmp_path / "drf_labels.pgm").exists()


def test_predict_separable_scene_near_perfect(tmp_path):
    s, t, p = tmp_path / "s", tmp_path / "t", tmp_path / "p"
    cli.main(["synth", "--out", str(s), "--height", "24", "--width", "24", "--separation", "8",
              "--seed", "1"])
    cli.main(["train", "--cube", str(s / "cube.bin"), "--labels", str(s / "labels.pgm"), "--out", str(t)])
    cli.main(["predict", "--model", str(t / "model.ivm"), "--cube", str(s / "cube.bin"), "--out", str(p)])
    lab = data.read_labels(p / "labels.pgm")
    assert np.mean(lab == data.read_labels(s / "truth.pgm")) >= 0.99


def test_eval_perfect_and_external_prediction(scene_dir, tmp_path, capsys):
    truth = scene_dir / "truth.pgm"
    assert cli.main(["eval", "--pred", str(truth), "--truth", str(truth), "--out", str(tmp_path)]) == 0
    assert "OA 100.0" in capsys.readouterr().out
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[1].split(",")[-3:] == ["100.0", "100.0", "1.00"]
    ext = tmp_path / "ext.csv"
    data.write_labels(ext, data.read_labels(truth))
    assert cli.main(["eval", "--pred", str(ext), "--truth", str(truth), "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "metrics.csv").read_text() == (tmp_path / "metrics.csv").read_text()


def test_eval_rejection_rows(scene_dir, model_dir, tmp_path):
    cli.main(["predict", "--model", str(model_dir / "model.ivm"), "--cube",
              str(scene_dir / "cube.bin"), "--out", str(tmp_path / "p")])
    cli.main(["eval", "--probs", str(tmp_path / "p" / "probs.bin"), "--truth",
              str(scene_dir / "truth.pgm"), "--out", str(tmp_path / "e")])
    lines = (tmp_path / "e" / "rejection.csv").read_text().splitlines()
    assert lines[0] == "threshold,rejection_rate,oa" and len(lines) == 11


def test_selftrain_zero_iterations_byte_identical(scene_dir, model_dir, tmp_path):
    assert cli.main(["selftrain", "--model", str(model_dir / "model.ivm"), "--cube",
                     str(scene_dir / "cube.bin"), "--labels", str(scene_dir / "labels.pgm"),
                     "--out", str(tmp_path), "--max-iterations", "0"]) == 0
    assert (tmp_path / "model.ivm").read_bytes() == (model_dir / "model.ivm").read_bytes()
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header == "iteration,added,pruned,n_train,n_iv,q,oa,aa,kappa"


def test_config_file_and_override(scene_dir, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[train]\ncube = {scene_dir / 'cube.bin'}\nlabels = {scene_dir / 'labels.pgm'}\n"
                   f"gamma = 0.2\nout = {tmp_path / 'o'}\n")
    assert cli.main(["train", "--config", str(cfg), "--lam", "0.05"]) == 0
    m = modelio.load(tmp_path / "o" / "model.ivm")
    assert m.params.gamma == 0.2 and m.lam == 0.05
    cfg.write_text("[train]\nbogus = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_exit_codes(scene_dir, tmp_path, capsys):
    assert cli.main(["train", "--cube", str(tmp_path / "none.bin"), "--labels",
                     str(scene_dir / "labels.pgm"), "--out", str(tmp_path)]) == 2
    assert "none.bin" in capsys.readouterr().err
    assert cli.main(["train", "--out", str(tmp_path)]) == 1
    assert cli.main(["train", "--cube", str(scene_dir / "cube.bin"), "--labels",
                     str(scene_dir / "labels.pgm"), "--out", str(tmp_path), "--gamma", "-1"]) == 1
    assert cli.main(["nonsense"]) == 1
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert cli.main(["predict", "--model", str(bad), "--cube", str(scene_dir / "cube.bin"),
                     "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "iivm", "eval", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "truth" in r.stderr
