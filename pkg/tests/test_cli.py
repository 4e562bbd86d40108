import json
import os
import subprocess
import sys

import pytest

from locate.data import load_dataset
from locate.evaluation import DETECTIONS_HEADER, Detection, read_detections, write_detections

SUBCOMMANDS = ["generate", "preprocess", "train", "predict", "nms", "eval", "report"]
TINY = ["--seq-len", "12", "--snippet", "4", "--dim", "8", "--layers", "1", "--heads", "2", "--samples-k", "2", "--queries", "5"]


def run(*args, cwd):
    env = {**os.environ, "LOCATE_THREADS": "1"}
    return subprocess.run([sys.executable, "-m", "locate", *args], cwd=cwd, env=env, capture_output=True, text=True)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("generate", "--classes", "3", "--sequences", "4", "--seed", "7", "--duration-min", "5", "--duration-max", "6", "-o", "train.json", cwd=d).returncode == 0
    res = run("train", "--train", "train.json", *TINY, "--epochs", "2", "--batch", "2", "--lr", "1e-2", "-o", "run", cwd=d)
    assert res.returncode == 0, res.stderr
    return d


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub, tmp_path):
    res = run(sub, "--help", cwd=tmp_path)
    assert res.returncode == 0 and "--out" in res.stdout


def test_generate_is_loadable_and_deterministic(tmp_path):
    args = ["generate", "--classes", "5", "--sequences", "20", "--seed", "7"]
    first = run(*args, "-o", "a.json", cwd=tmp_path)
    assert first.returncode == 0 and "generate config:" in first.stdout
    assert run(*args, "-o", "b.json", cwd=tmp_path).returncode == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert len(load_dataset(tmp_path / "a.json")) == 20


def test_invalid_flags_exit_2(tmp_path):
    res = run("generate", "--sequences", "0", "-o", "x.json", cwd=tmp_path)
    assert res.returncode == 2 and "num_sequences" in res.stderr
    assert run("generate", "--bogus", "-o", "x.json", cwd=tmp_path).returncode == 2


def test_missing_val_file_exit_2(workdir):
    res = run("train", "--train", "train.json", "--val", "missing.json", *TINY, "--epochs", "1", "-o", "r2", cwd=workdir)
    assert res.returncode == 2 and "missing.json" in res.stderr


def test_full_size_default_flags_accepted(workdir):
    res = run("train", "--train", "train.json", "--lr", "4e-3", "--layers", "4", "--heads", "4", "--dim", "256", "--seq-len", "100", "--epochs", "0", "-o", "full", cwd=workdir)
    assert res.returncode == 0, res.stderr
    config = json.loads(res.stdout.split("train config: ", 1)[1].splitlines()[0])
    assert config["model"]["C"] == 256 and config["model"]["H"] == 4 and config["train"]["learning_rate"] == 4e-3


def test_divergence_exit_3(workdir):
    res = run("train", "--train", "train.json", *TINY, "--epochs", "3", "--lr", "1e300", "--clip", "0", "-o", "boom", cwd=workdir)
    assert res.returncode == 3
    assert (workdir / "boom" / "last_good.ckpt").exists()


def test_train_outputs(workdir):
    log = (workdir / "run" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,l_total,l_cb,l_span,val_map50" and len(log) == 3
    assert (workdir / "run" / "best.ckpt").read_bytes()[:4] == b"LOCT"


def test_predict_outputs(workdir):
    res = run("predict", "--ckpt", "run/best.ckpt", "--data", "train.json", "-o", "det.txt", cwd=workdir)
    assert res.returncode == 0, res.stderr
    assert len(read_detections(workdir / "det.txt")) > 0
    first = (workdir / "det.txt").read_bytes()
    assert run("predict", "--ckpt", "run/best.ckpt", "--data", "train.json", "-o", "det.txt", cwd=workdir).returncode == 0
    assert (workdir / "det.txt").read_bytes() == first

    assert run("predict", "--ckpt", "run/best.ckpt", "--data", "train.json", "--score-threshold", "1.1", "-o", "none.txt", cwd=workdir).returncode == 0
    assert (workdir / "none.txt").read_text() == DETECTIONS_HEADER + "\n"


def test_predict_class_mismatch_exit_2(workdir):
    assert run("generate", "--classes", "4", "--sequences", "2", "-o", "four.json", cwd=workdir).returncode == 0
    assert run("predict", "--ckpt", "run/best.ckpt", "--data", "four.json", "-o", "x.txt", cwd=workdir).returncode == 2


def test_nms_threshold_one_is_identity(workdir):
    assert run("predict", "--ckpt", "run/best.ckpt", "--data", "train.json", "-o", "raw.txt", cwd=workdir).returncode == 0
    assert run("nms", "--detections", "raw.txt", "--nms-iou", "1.0", "-o", "same.txt", cwd=workdir).returncode == 0
    assert sorted(read_detections(workdir / "same.txt"), key=repr) == sorted(read_detections(workdir / "raw.txt"), key=repr)


def test_eval_perfect_and_report(workdir):
    data = load_dataset(workdir / "train.json")
    perfect = [Detection(s.id, sp.class_id, sp.t_start, sp.t_end, 1.0) for s in data.sequences for sp in s.spans]
    write_detections(perfect, workdir / "perfect.txt")
    res = run("eval", "--detections", "perfect.txt", "--data", "train.json", "-o", "rep.json", cwd=workdir)
    assert res.returncode == 0, res.stderr
    rep = json.loads((workdir / "rep.json").read_text())
    assert rep["avg_map"] == 1.0 and len(rep["thresholds"]) == 9 and "confusion" in rep
    assert (workdir / "rep.csv").exists()

    res = run("report", "--report", "rep.json", "-o", "plots", cwd=workdir)
    assert res.returncode == 0, res.stderr
    svg = (workdir / "plots" / "ap_vs_tiou.svg").read_text()
    assert svg.count("<polyline") == 3 and svg.count('class="axis"') == 2
    assert (workdir / "plots" / "confusion.svg").read_text().count('class="cell"') == 16


def test_report_two_classes(tmp_path):
    doc = {"thresholds": [0.1, 0.5], "class_names": ["a", "b"], "gt_counts": [1, 1], "ap": [[1.0, 0.5], [0.2, 0.0]],
           "map_per_threshold": [0.6, 0.25], "avg_map": 0.425}
    (tmp_path / "r.json").write_text(json.dumps(doc))
    assert run("report", "--report", "r.json", "-o", "out", cwd=tmp_path).returncode == 0
    svg = (tmp_path / "out" / "ap_vs_tiou.svg").read_text()
    assert svg.count("<polyline") == 2 and svg.count('class="axis"') == 2


def test_malformed_inputs_exit_2(tmp_path):
    (tmp_path / "bad.txt").write_text("{oops\n")
    (tmp_path / "d.json").write_text("{}")
    assert run("nms", "--detections", "bad.txt", "-o", "o.txt", cwd=tmp_path).returncode == 2
    assert run("eval", "--detections", "bad.txt", "--data", "d.json", "-o", "r.json", cwd=tmp_path).returncode == 2
    assert run("report", "--report", "d.json", "-o", "p", cwd=tmp_path).returncode == 2


def test_preprocess_writes_tensor(workdir):
    import numpy as np

    res = run("preprocess", "--train", "train.json", "--seq-len", "12", "--snippet", "4", "-o", "snips.npy", cwd=workdir)
    assert res.returncode == 0, res.stderr
    assert np.load(workdir / "snips.npy").shape == (4, 12, 4 * 66)
