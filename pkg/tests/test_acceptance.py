"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line
in the pytest summary (see conftest.py).

Run on its own with ``pytest tests/test_acceptance.py``.  The two training
criteria drive the installed command line exactly as documented in README.md.
"""

import csv
import itertools
import json
import math
import os
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from locate import autodiff as ad
from locate.autodiff import Tensor
from locate.data import LabeledSpan
from locate.evaluation import Detection, average_precision, human_agreement_map, map_sweep, temporal_nms, tiou
from locate.matching import ClassStats, batch_loss, cb_focal_loss, cb_weight, hungarian
from locate.model import ModelConfig, deformable_attention, forward_batch, init_params, split_batch
from oracles import assignment_cost, brute_force_min_cost, interval_iou, oracle_ap, random_ap_instance

H, TOL, ATOL = 1e-6, 1e-4, 1e-8
TINY = dict(T=6, N_f=2, C=8, L_e=1, L_d=1, H=2, K=2, N_a=3, C_cls=3)

# The documented tiny overfit run (README.md, "Tiny overfit run").
OVERFIT_DATA = ["--classes", "5", "--sequences", "20", "--seed", "1"]
OVERFIT_TRAIN = ["--seq-len", "50", "--snippet", "8", "--dim", "64", "--layers", "2", "--heads", "2", "--samples-k", "2",
                 "--queries", "10", "--lr", "1e-3", "--batch", "20", "--epochs", "300", "--lambda-iou", "0.2",
                 "--lambda-l1", "0.5"]


def cli(*args, cwd):
    env = {**os.environ, "LOCATE_THREADS": "1"}
    res = subprocess.run([sys.executable, "-m", "locate", *args], cwd=cwd, env=env, capture_output=True, text=True)
    assert res.returncode == 0, f"locate {' '.join(args)} failed:\n{res.stderr}"
    return res


def read_log(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- 1


def _op_cases():
    """Every differentiable op, as (name, f(a, b)) with the checked input ``a``."""
    rng = np.random.default_rng(100)
    positions = rng.uniform(-0.8, 4.8, size=(2, 7))
    positions[np.abs(positions - np.round(positions)) < 1e-3] += 0.01  # keep samples off the knots
    gain, bias = Tensor(rng.normal(size=(4, 1))), Tensor(rng.normal(size=(4, 1)))
    return [
        ("add", lambda a, b: a + b),
        ("sub", lambda a, b: a - b),
        ("mul", lambda a, b: a * b),
        ("div", lambda a, b: b / (a * a + 1.0)),
        ("neg", lambda a, b: -a),
        ("scale", lambda a, b: ad.scale(a, -2.5)),
        ("abs", lambda a, b: ad.absolute(a)),
        ("relu", lambda a, b: ad.relu(a)),
        ("sigmoid", lambda a, b: ad.sigmoid(a)),
        ("log", lambda a, b: ad.log(a * a + 0.5)),
        ("exp", lambda a, b: ad.exp(a)),
        ("power", lambda a, b: ad.power(a * a + 0.5, 1.7)),
        ("maximum", lambda a, b: ad.maximum(a, b)),
        ("minimum", lambda a, b: ad.minimum(a, b)),
        ("clamp", lambda a, b: ad.clamp(a, -0.3, 0.4)),
        ("matmul", lambda a, b: a @ ad.transpose(b)),
        ("softmax", lambda a, b: ad.softmax(a, axis=-1)),
        ("layer_norm", lambda a, b: ad.layer_norm(a, 0, gain, bias)),
        ("interp_sample", lambda a, b: ad.interp_sample(ad.reshape(a, (2, 2, 5)), positions)),
        ("sum", lambda a, b: ad.reduce("sum", a, axis=1)),
        ("mean", lambda a, b: ad.reduce("mean", a, axis=0)),
        ("max", lambda a, b: ad.reduce("max", a, axis=0)),
        ("concat", lambda a, b: ad.concat([a, b], axis=1)),
        ("stack", lambda a, b: ad.stack([a, b], axis=0)),
        ("reshape", lambda a, b: ad.reshape(a, (-1,))),
        ("transpose", lambda a, b: ad.transpose(a)),
        ("take", lambda a, b: ad.take(a, np.array([0, 3, 3, 1]), axis=0)),
        ("getitem", lambda a, b: a[1:, ::2]),
    ]


def _full_loss_check():
    cfg = ModelConfig(**TINY, seed=1)
    params = init_params(cfg)
    rng = np.random.default_rng(11)
    for p in params.values():  # move every weight off its structured initial value
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    snippets = rng.normal(size=(2, cfg.T, cfg.D))
    targets = [([LabeledSpan(0, 0.5, 2.0), LabeledSpan(2, 3.0, 5.5)], 6.0), ([LabeledSpan(1, 1.0, 4.0)], 6.0)]
    stats = ClassStats([3, 2, 4, 5], beta=0.99, gamma=2.0)

    def loss():
        logits, spans, raw = forward_batch(snippets, params, cfg)
        return batch_loss(split_batch(logits, spans, raw), targets, stats).l_total

    return ad.parameters_grad_check(loss, params, h=H, tol=TOL, atol=ATOL)


@pytest.mark.criterion(1, "gradient integrity")
def test_gradient_integrity(record_property):
    start = time.perf_counter()
    worst = 0.0
    for name, op in _op_cases():
        for seed in range(5):
            rng = np.random.default_rng(seed)
            a0 = rng.normal(size=(4, 5))
            b = Tensor(rng.normal(size=(4, 5)))
            w = Tensor(rng.normal(size=op(Tensor(a0), b).shape))
            rep = ad.grad_check(lambda a: (op(a, b) * w).sum(), a0, h=H, tol=TOL, atol=ATOL)
            assert rep.passed, (name, seed, rep.max_rel_err)
            worst = max(worst, rep.max_rel_err)

    reports = _full_loss_check()
    failed = {k: r.max_rel_err for k, r in reports.items() if not r.passed}
    assert not failed, failed
    worst = max([worst] + [r.max_rel_err for r in reports.values()])
    elapsed = time.perf_counter() - start
    record_property("max_rel_err", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert elapsed < 120


# ---------------------------------------------------------------- 2


@pytest.mark.criterion(2, "matching exactness")
def test_matching_exactness(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    checked = 0
    for n in range(2, 8):
        perms = np.array(list(itertools.permutations(range(n))))
        for trial in range(1000):
            # every fourth matrix has small integer entries, which forces ties
            cost = rng.integers(0, 4, size=(n, n)).astype(float) if trial % 4 == 0 else rng.random((n, n))
            perm = hungarian(cost)
            assert sorted(perm.tolist()) == list(range(n))
            assert assignment_cost(cost, perm) == brute_force_min_cost(cost, perms), (n, trial)
            checked += 1
    elapsed = time.perf_counter() - start
    record_property("matrices", checked)
    record_property("seconds", f"{elapsed:.1f}")
    assert elapsed < 60


# ---------------------------------------------------------------- 3


@pytest.mark.criterion(3, "metric oracle")
def test_metric_oracle(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(500):
        dets, gts = random_ap_instance(rng)
        t = float(rng.choice(np.round(np.arange(0.1, 1.0, 0.1), 1)))
        err = abs(average_precision(dets, gts, t) - oracle_ap(dets, gts, t))
        worst = max(worst, err)
    assert worst <= 1e-12

    gts = [(f"s{i % 4}", LabeledSpan(int(rng.integers(0, 3)), float(a), float(a) + float(rng.uniform(0.5, 2.5))))
           for i, a in enumerate(rng.uniform(0, 10, 16))]
    dets = [Detection(f"s{int(rng.integers(0, 4))}", int(rng.integers(0, 3)), float(a), float(a) + float(rng.uniform(0.5, 2.5)),
                      float(rng.choice([0.2, 0.4, 0.6, 0.8])))
            for a in rng.uniform(0, 10, 40)]
    base = map_sweep(dets, gts, 3)
    for _ in range(100):
        shuffled = map_sweep([dets[i] for i in rng.permutation(len(dets))], [gts[i] for i in rng.permutation(len(gts))], 3)
        assert shuffled.map_per_threshold == base.map_per_threshold
        assert np.array_equal(shuffled.ap, base.ap)
    record_property("max_abs_err", f"{worst:.1e}")


# ---------------------------------------------------------------- 4


@pytest.mark.criterion(4, "K=1 degeneracy")
def test_k1_degeneracy(record_property):
    worst = 0.0
    for cfg in (ModelConfig(**{**TINY, "K": 1}), ModelConfig(C=256, T=100, H=4, K=1, L_e=1, L_d=0, N_a=2)):
        params = init_params(cfg)
        name = "enc0.attn"
        params[f"{name}.offset.w"].data[:] = 0.0
        params[f"{name}.offset.b"].data[:] = 0.0
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, cfg.C, cfg.T))
        ref = np.arange(cfg.T, dtype=float)
        z = rng.normal(size=(1, cfg.C, cfg.T))
        out = deformable_attention(Tensor(z), ref, Tensor(x), params, name, cfg).numpy()[0]
        value = params[f"{name}.value.w"].data @ x[0] + params[f"{name}.value.b"].data
        expected = params[f"{name}.out.w"].data @ value + params[f"{name}.out.b"].data
        worst = max(worst, float(np.max(np.abs(out - expected))))
    record_property("max_abs_err", f"{worst:.1e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------- 5


@pytest.mark.criterion(5, "loss reductions")
def test_loss_reductions(record_property):
    rng = np.random.default_rng(5)
    plain = ClassStats([4, 7, 2], beta=0.0, gamma=0.0)
    worst = 0.0
    for _ in range(200):
        z = rng.normal(size=3) * 4
        c = int(rng.integers(0, 3))
        # -log(sigmoid(z)) = log1p(exp(-z)) and -log(1 - sigmoid(z)) = log1p(exp(z))
        bce = float(np.sum(np.where(np.arange(3) == c, np.log1p(np.exp(-z)), np.log1p(np.exp(z)))))
        worst = max(worst, abs(cb_focal_loss(z, c, plain) - bce))
    assert worst <= 1e-12
    assert abs(cb_focal_loss(np.zeros(3), 0, plain) - 3 * math.log(2)) <= 1e-12

    for beta, count in [(0.99, 1), (0.99, 100), (0.5, 10)]:
        direct = (1 - beta) / (1 - beta**count)
        exact = float((1 - Fraction(beta)) / (1 - Fraction(beta) ** count))
        assert cb_weight(count, beta) == pytest.approx(direct, rel=1e-15, abs=0)
        assert cb_weight(count, beta) == pytest.approx(exact, rel=1e-13, abs=0)
    record_property("bce_max_abs_err", f"{worst:.1e}")
    record_property("w(0.99,100)", f"{cb_weight(100, 0.99):.7f}")


# ---------------------------------------------------------------- 6


@pytest.mark.criterion(6, "end-to-end overfit")
def test_end_to_end_overfit(tmp_path, record_property):
    cli("generate", *OVERFIT_DATA, "-o", "train.json", cwd=tmp_path)
    start = time.perf_counter()
    cli("train", "--train", "train.json", *OVERFIT_TRAIN, "--seed", "1", "--eval-every", "10", "-o", "seed1", cwd=tmp_path)
    elapsed = time.perf_counter() - start

    # score the best checkpoint through the remaining pipeline stages
    cli("predict", "--ckpt", "seed1/best.ckpt", "--data", "train.json", "-o", "raw.txt", cwd=tmp_path)
    cli("nms", "--detections", "raw.txt", "--nms-iou", "0.5", "-o", "dets.txt", cwd=tmp_path)
    cli("eval", "--detections", "dets.txt", "--data", "train.json", "-o", "report.json", cwd=tmp_path)
    cli("report", "--report", "report.json", "-o", "plots", cwd=tmp_path)
    report = json.loads((tmp_path / "report.json").read_text())
    map50 = report["map_per_threshold"][report["thresholds"].index(0.5)]
    assert (tmp_path / "plots" / "ap_vs_tiou.svg").exists()

    losses = {1: read_log(tmp_path / "seed1" / "train_log.csv")}
    for seed in range(2, 6):
        cli("train", "--train", "train.json", *OVERFIT_TRAIN, "--seed", str(seed), "--eval-every", "0", "-o", f"seed{seed}",
            cwd=tmp_path)
        losses[seed] = read_log(tmp_path / f"seed{seed}" / "train_log.csv")

    record_property("train_map50", f"{map50:.3f}")
    record_property("train_seconds", f"{elapsed:.0f}")
    record_property("loss_1_to_300", " ".join(f"s{s}:{log[0]['l_total']:.3f}->{log[-1]['l_total']:.3f}" for s, log in losses.items()))
    assert map50 >= 0.9
    assert elapsed <= 600
    for seed, log in losses.items():
        assert len(log) == 300 and log[-1]["l_total"] < log[0]["l_total"], seed


# ---------------------------------------------------------------- 7


@pytest.mark.criterion(7, "generalization smoke")
def test_generalization_smoke(tmp_path, record_property):
    cli("generate", "--classes", "5", "--sequences", "200", "--seed", "11", "-o", "train.json", cwd=tmp_path)
    cli("generate", "--classes", "5", "--sequences", "50", "--seed", "12", "-o", "val.json", cwd=tmp_path)
    cli("train", "--train", "train.json", "--val", "val.json", "--seq-len", "50", "--snippet", "8", "--dim", "64",
        "--layers", "2", "--heads", "2", "--samples-k", "2", "--queries", "10", "--lr", "1e-3", "--batch", "4",
        "--epochs", "100", "--lambda-iou", "0.5", "--lambda-l1", "1.25", "--cb-beta", "0", "--cb-gamma", "2",
        "--eval-every", "5", "--seed", "1", "-o", "run", cwd=tmp_path)

    # the val-set mAP of the kept checkpoint, recomputed through predict and eval
    cli("predict", "--ckpt", "run/best.ckpt", "--data", "val.json", "--nms-iou", "0.5", "-o", "val_dets.txt", cwd=tmp_path)
    cli("eval", "--detections", "val_dets.txt", "--data", "val.json", "-o", "val_report.json", cwd=tmp_path)
    report = json.loads((tmp_path / "val_report.json").read_text())
    map50 = report["map_per_threshold"][report["thresholds"].index(0.5)]
    logged = max(r["val_map50"] for r in read_log(tmp_path / "run" / "train_log.csv") if not math.isnan(r["val_map50"]))
    record_property("val_map50", f"{map50:.3f}")
    assert map50 == pytest.approx(logged, abs=1e-12)
    assert map50 >= 0.5


# ---------------------------------------------------------------- 8


@pytest.mark.criterion(8, "determinism")
def test_determinism(tmp_path, record_property):
    outputs = ["data.json", "run/train_log.csv", "run/best.ckpt", "run/last.ckpt", "dets.txt", "report.json",
               "report.csv", "plots/ap_vs_tiou.svg", "plots/confusion.svg"]
    digests = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        cli("generate", "--classes", "3", "--sequences", "6", "--seed", "8", "-o", "data.json", cwd=d)
        cli("train", "--train", "data.json", "--seq-len", "16", "--snippet", "4", "--dim", "16", "--layers", "1",
            "--heads", "2", "--samples-k", "2", "--queries", "6", "--lr", "1e-3", "--batch", "3", "--epochs", "4",
            "--seed", "3", "-o", "run", cwd=d)
        cli("predict", "--ckpt", "run/best.ckpt", "--data", "data.json", "--nms-iou", "0.5", "-o", "dets.txt", cwd=d)
        cli("eval", "--detections", "dets.txt", "--data", "data.json", "-o", "report.json", cwd=d)
        cli("report", "--report", "report.json", "-o", "plots", cwd=d)
        digests.append({f: (d / f).read_bytes() for f in outputs})
    differing = [f for f in outputs if digests[0][f] != digests[1][f]]
    record_property("files_compared", len(outputs))
    assert not differing, differing


# ---------------------------------------------------------------- 9


@pytest.mark.criterion(9, "human-mAP utility")
def test_human_map_utility(record_property):
    # every pair of annotations agrees on the onset and one covers 9 s of the other's 20 s
    annotations = {}
    for i in range(4):
        first = [LabeledSpan(c, 30.0 * c + i, 30.0 * c + i + 20.0) for c in range(3)]
        second = [LabeledSpan(c, 30.0 * c + i, 30.0 * c + i + 9.0) for c in range(3)]
        for a, b in zip(first, second):
            assert tiou(a.t_start, a.t_end, b.t_start, b.t_end) == 0.45
            assert interval_iou(a.t_start, a.t_end, b.t_start, b.t_end) == 0.45
        annotations[f"seq{i}"] = [first, second]
    at_half = human_agreement_map(annotations, 3, 0.5)
    at_four_tenths = human_agreement_map(annotations, 3, 0.4)
    record_property("map@0.5", at_half)
    record_property("map@0.4", at_four_tenths)
    assert at_half == 0.0 and at_four_tenths == 1.0


# ---------------------------------------------------------------- 10


@pytest.mark.criterion(10, "NMS contract")
def test_nms_contract(record_property):
    three = [Detection("s", 0, 0.0, 2.0, 0.9), Detection("s", 0, 1.0, 3.0, 0.8), Detection("s", 0, 2.5, 4.0, 0.7)]
    assert temporal_nms(three, 0.3) == [three[0], three[2]]

    rng = np.random.default_rng(10)
    trials = 300
    for _ in range(trials):
        thr = float(rng.uniform(0.05, 1.0))
        dets = [Detection(f"s{int(rng.integers(0, 2))}", int(rng.integers(0, 3)), float(a), float(a) + float(rng.uniform(0.3, 2.0)),
                          float(rng.random()))
                for a in rng.uniform(0, 6, int(rng.integers(0, 25)))]
        kept = temporal_nms(dets, thr)
        assert set(kept) <= set(dets)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id and a.seq_id == b.seq_id:
                    assert interval_iou(a.t_start, a.t_end, b.t_start, b.t_end) < thr
        # every dropped detection overlaps a kept, higher-ranked one of its class
        for d in set(dets) - set(kept):
            assert any(k.class_id == d.class_id and k.seq_id == d.seq_id and k.score >= d.score
                       and interval_iou(k.t_start, k.t_end, d.t_start, d.t_end) >= thr for k in kept)
    record_property("random_trials", trials)
