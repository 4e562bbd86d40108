import math
import struct

import numpy as np
import pytest

from locate.autodiff import Parameter
from locate.data import LabeledSpan, MotionSequence, SyntheticConfig, generate_synthetic
from locate.evaluation import tiou
from locate.model import ModelConfig, init_params
from locate.trainer import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    LOG_HEADER,
    OptimizerState,
    TrainConfig,
    adam_step,
    checkpoint_bytes,
    checkpoint_from_bytes,
    class_counts,
    fit,
    load_checkpoint,
    predict,
    predict_raw,
    save_checkpoint,
    snapshot,
    snippet_batch,
)


def test_adam_first_step_is_minus_lr():
    cfg = TrainConfig(learning_rate=0.01, grad_clip_norm=None)
    p = {"w": Parameter("w", np.array([2.0]))}
    state = OptimizerState()
    adam_step(p, {"w": np.array([1.0])}, state, cfg)
    assert p["w"].data[0] == pytest.approx(2.0 - 0.01 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_two_steps_closed_form():
    cfg = TrainConfig(learning_rate=0.1, grad_clip_norm=None)
    b1, b2, eps, lr = cfg.beta1, cfg.beta2, cfg.eps, cfg.learning_rate
    p = {"w": Parameter("w", np.array([1.0]))}
    state = OptimizerState()
    g1, g2 = 0.5, -2.0
    adam_step(p, {"w": np.array([g1])}, state, cfg)
    adam_step(p, {"w": np.array([g2])}, state, cfg)
    # first step: m_hat = g1, v_hat = g1^2
    w1 = 1.0 - lr * g1 / (abs(g1) + eps)
    m2 = b1 * (1 - b1) * g1 + (1 - b1) * g2
    v2 = b2 * (1 - b2) * g1**2 + (1 - b2) * g2**2
    w2 = w1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    assert abs(p["w"].data[0] - w2) <= 1e-12


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    cfg = TrainConfig(grad_clip_norm=None)
    p = {"w": Parameter("w", np.array([1.0, -1.0]))}
    state = OptimizerState(m={"w": np.array([0.2, 0.4])}, v={"w": np.array([0.0, 0.0])}, step=0)
    adam_step(p, {"w": np.zeros(2)}, state, cfg)
    assert np.allclose(state.m["w"], [0.18, 0.36])
    cfg2 = TrainConfig(grad_clip_norm=None)
    q = {"w": Parameter("w", np.array([1.0, -1.0]))}
    adam_step(q, {"w": np.zeros(2)}, OptimizerState(), cfg2)
    assert q["w"].data.tolist() == [1.0, -1.0]


def test_clipping_scales_gradient_before_moments():
    cfg = TrainConfig(grad_clip_norm=0.5)
    p = {"w": Parameter("w", np.zeros(2))}
    state = OptimizerState()
    norm = adam_step(p, {"w": np.array([3.0, 4.0])}, state, cfg)
    assert norm == 5.0
    assert np.allclose(state.m["w"], (1 - cfg.beta1) * 0.1 * np.array([3.0, 4.0]), atol=1e-15)


def test_nan_gradient_rejected():
    with pytest.raises(FloatingPointError):
        adam_step({"w": Parameter("w", np.zeros(1))}, {"w": np.array([np.nan])}, OptimizerState(), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def _seq(sid, spans, seconds=4.0):
    return MotionSequence(sid, 30.0, np.zeros((int(seconds * 30), 22, 3)), tuple(spans))


def test_class_counts(caplog):
    seqs = [
        _seq("a", [LabeledSpan(0, 0.0, 1.0), LabeledSpan(0, 1.0, 2.0), LabeledSpan(1, 2.0, 3.0)]),
        _seq("b", [LabeledSpan(0, 0.5, 1.5)]),
        _seq("c", []),
    ]
    stats = class_counts(seqs, 3, num_queries=5)
    assert stats.counts[:2] == [3.0, 1.0]
    assert stats.counts[2] == 1.0 and "class 2" in caplog.text
    assert stats.counts[3] == (5 - 3) + (5 - 1) + 5
    assert stats.weight(1) > stats.weight(0)
    with pytest.raises(ValueError):
        class_counts([], 3, 5)


def tiny_setup(n=3, epochs=3, **train_kw):
    ds = generate_synthetic(SyntheticConfig(num_sequences=n, num_classes=3, seed=2, duration_range=(5.0, 6.0)))
    mc = ModelConfig(T=12, N_f=4, C=8, L_e=1, L_d=1, H=2, K=2, N_a=4, C_cls=3, seed=3)
    tc = TrainConfig(epochs=epochs, batch_size=2, seed=5, learning_rate=1e-2, **train_kw)
    return ds, mc, tc


def test_fit_is_bitwise_deterministic():
    ds, mc, tc = tiny_setup()
    a = fit(ds.sequences, None, mc, tc)
    b = fit(ds.sequences, None, mc, tc)
    assert a.log_csv() == b.log_csv()
    assert a.log_csv().splitlines()[0] == ",".join(LOG_HEADER)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_fit_rejects_too_few_queries():
    ds, mc, tc = tiny_setup()
    small = ModelConfig(**{**mc.to_dict(), "N_a": 1})
    with pytest.raises(ValueError, match="N_a"):
        fit(ds.sequences, None, small, tc)


def test_fit_keeps_best_checkpoint():
    ds, mc, tc = tiny_setup(epochs=4)
    result = fit(ds.sequences, ds.sequences, mc, tc)
    best_row = max(result.log, key=lambda r: r.val_map50)
    assert result.best.epoch == best_row.epoch


def test_initial_loss_dominated_by_no_action_and_decreasing():
    ds = generate_synthetic(SyntheticConfig(num_sequences=20, num_classes=5, seed=1))
    mc = ModelConfig(T=50, N_f=8, C=64, L_e=2, L_d=2, H=2, K=2, N_a=10, C_cls=5, seed=1)
    tc = TrainConfig(learning_rate=1e-3, epochs=10, batch_size=20, seed=1, lambda_iou=0.2, lambda_l1=0.5, eval_every=0)
    log = fit(ds.sequences, None, mc, tc).log
    assert log[-1].l_total < log[0].l_total


def test_checkpoint_round_trip(tmp_path):
    ds, mc, tc = tiny_setup(epochs=1)
    result = fit(ds.sequences, None, mc, tc, class_names=ds.class_names, data_seed=2)
    save_checkpoint(result.final, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.model_config == mc and back.class_stats == result.final.class_stats
    assert back.optimizer.step == result.final.optimizer.step and back.data_seed == 2
    x = snippet_batch(ds.sequences, mc)
    a = predict_raw(result.params, mc, x)
    b = predict_raw(back.model_params(), mc, x)
    for ra, rb in zip(a, b):
        assert ra.class_logits.numpy().tobytes() == rb.class_logits.numpy().tobytes()
        assert ra.spans.numpy().tobytes() == rb.spans.numpy().tobytes()


def test_checkpoint_tampering_detected():
    ds, mc, tc = tiny_setup(epochs=1)
    stats = class_counts(ds.sequences, 3, 4)
    blob = bytearray(checkpoint_bytes(snapshot(mc, init_params(mc), stats)))
    assert bytes(blob[:4]) == CHECKPOINT_MAGIC
    bad_version = bytearray(blob)
    bad_version[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(bytes(bad_version))
    # first record follows magic, version, config block and record count
    (block,) = struct.unpack("<I", blob[8:12])
    rec = 12 + block + 4
    (name_len,) = struct.unpack("<I", blob[rec : rec + 4])
    shape_at = rec + 4 + name_len + 4
    tampered = bytearray(blob)
    (dim0,) = struct.unpack("<I", tampered[shape_at : shape_at + 4])
    tampered[shape_at : shape_at + 4] = struct.pack("<I", dim0 + 1)
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(bytes(tampered))


def test_single_sequence_overfit_recovers_both_spans():
    ds = generate_synthetic(SyntheticConfig(num_sequences=1, num_classes=5, seed=1, spans_per_sequence_range=(2, 2)))
    mc = ModelConfig(T=30, N_f=8, C=32, L_e=2, L_d=2, H=2, K=2, N_a=10, C_cls=5, seed=1)
    tc = TrainConfig(learning_rate=1e-3, epochs=200, batch_size=1, seed=1, eval_every=0)
    result = fit(ds.sequences, None, mc, tc)
    dets = predict(result.final.model_params(), mc, ds.sequences)
    for span in ds.sequences[0].spans:
        best = max(tiou(d.t_start, d.t_end, span.t_start, span.t_end) for d in dets if d.class_id == span.class_id)
        assert best >= 0.9
