"""Adam training loop, validation scoring and binary checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Parameter
from .data import MotionSequence, preprocess
from .evaluation import Detection, decode_predictions, ground_truth_of, map_sweep, temporal_nms
from .matching import ClassStats, batch_loss
from .model import ModelConfig, Params, RawPredictionSet, check_params, forward_batch, init_params, split_batch

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LOCT"
CHECKPOINT_VERSION = 1
LOG_HEADER = ("epoch", "l_total", "l_cb", "l_span", "val_map50")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 4
    grad_clip_norm: float | None = 0.1
    seed: int = 0
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    cb_beta: float = 0.99
    cb_gamma: float = 2.0
    lr_schedule: str = "constant"
    score_threshold: float = 0.0
    nms_iou: float = 0.5
    eval_every: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray], state: OptimizerState,
              cfg: TrainConfig, lr: float | None = None) -> float:
    """One bias-corrected Adam update in place.  Returns the pre-clip gradient norm."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    grads, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return norm


def class_counts(train_set: Sequence[MotionSequence], num_classes: int, num_queries: int,
                 beta: float = 0.99, gamma: float = 2.0) -> ClassStats:
    """Per-class span frequencies plus the padded no-action count."""
    if not train_set:
        raise ValueError("class counts need a non-empty training set")
    counts = [0] * num_classes
    sentinel = 0
    for seq in train_set:
        for span in seq.spans:
            counts[span.class_id] += 1
        sentinel += max(num_queries - len(seq.spans), 0)
    for c, n in enumerate(counts):
        if n == 0:
            log.warning("class %d never occurs in the training set; using count 1", c)
            counts[c] = 1
    return ClassStats(counts + [max(sentinel, 1)], beta, gamma)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    class_stats: ClassStats
    step: int = 0
    data_seed: int | None = None
    optimizer: OptimizerState | None = None
    train_config: TrainConfig | None = None
    class_names: list[str] = field(default_factory=list)
    epoch: int = 0

    def model_params(self) -> Params:
        params = {k: Parameter(k, v.copy()) for k, v in self.params.items()}
        check_params(params, self.model_config)
        return params


def snapshot(cfg: ModelConfig, params: Params, stats: ClassStats, **extra) -> Checkpoint:
    opt = extra.pop("optimizer", None)
    if opt is not None:
        opt = OptimizerState({k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()}, opt.step)
    return Checkpoint(cfg, {k: p.data.copy() for k, p in params.items()}, stats, optimizer=opt, **extra)


def _write_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "model": ckpt.model_config.to_dict(),
        "train": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "class_stats": ckpt.class_stats.to_dict(),
        "class_names": list(ckpt.class_names),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "data_seed": ckpt.data_seed,
        "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer.step,
    }
    records = [(k, v) for k, v in ckpt.params.items()]
    if ckpt.optimizer is not None:
        records += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.m.items()]
        records += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    block = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class CheckpointError(ValueError):
    pass


def _read(buf: io.BytesIO, n: int) -> bytes:
    out = buf.read(n)
    if len(out) != n:
        raise CheckpointError("truncated checkpoint")
    return out


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _read(buf, 4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (block_len,) = struct.unpack("<I", _read(buf, 4))
    try:
        meta = json.loads(_read(buf, block_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt config block: {err}") from None
    (count,) = struct.unpack("<I", _read(buf, 4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read(buf, 4))
        name = _read(buf, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        records[name] = np.frombuffer(_read(buf, 8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if buf.read(1):
        raise CheckpointError("trailing bytes after parameter records")

    cfg = ModelConfig(**meta["model"])
    params = {k: v for k, v in records.items() if not k.startswith("adam.")}
    try:
        check_params({k: Parameter(k, v) for k, v in params.items()}, cfg)
    except ValueError as err:
        raise CheckpointError(f"checkpoint does not match its model config: {err}") from None
    opt = None
    if meta.get("optimizer_step") is not None:
        opt = OptimizerState(
            {k[len("adam.m/"):]: v for k, v in records.items() if k.startswith("adam.m/")},
            {k[len("adam.v/"):]: v for k, v in records.items() if k.startswith("adam.v/")},
            int(meta["optimizer_step"]),
        )
    stats = meta["class_stats"]
    return Checkpoint(
        model_config=cfg,
        params=params,
        class_stats=ClassStats(stats["counts"], stats["beta"], stats["gamma"]),
        step=int(meta["step"]),
        data_seed=meta.get("data_seed"),
        optimizer=opt,
        train_config=None if meta.get("train") is None else TrainConfig(**meta["train"]),
        class_names=list(meta.get("class_names", [])),
        epoch=int(meta.get("epoch", 0)),
    )


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- inference


def snippet_batch(sequences: Sequence[MotionSequence], cfg: ModelConfig) -> np.ndarray:
    return np.stack([preprocess(s, cfg.N_f, cfg.T).data for s in sequences]) if sequences else np.zeros((0, cfg.T, cfg.D))


def predict_raw(params: Params, cfg: ModelConfig, snippets: np.ndarray, batch_size: int = 16) -> list[RawPredictionSet]:
    out: list[RawPredictionSet] = []
    for i in range(0, len(snippets), batch_size):
        out.extend(split_batch(*forward_batch(snippets[i : i + batch_size], params, cfg)))
    return out


def predict(
    params: Params,
    cfg: ModelConfig,
    sequences: Sequence[MotionSequence],
    score_threshold: float = 0.0,
    nms_iou: float | None = None,
    snippets: np.ndarray | None = None,
) -> list[Detection]:
    """Detections for every sequence; optional per-class NMS."""
    if snippets is None:
        snippets = snippet_batch(sequences, cfg)
    dets: list[Detection] = []
    for seq, raw in zip(sequences, predict_raw(params, cfg, snippets)):
        dets.extend(decode_predictions(raw, seq.id, seq.duration, score_threshold))
    if nms_iou is not None:
        dets = temporal_nms(dets, nms_iou)
    return dets


def evaluate_map(params: Params, cfg: ModelConfig, sequences: Sequence[MotionSequence], train_cfg: TrainConfig,
                 threshold: float = 0.5, snippets: np.ndarray | None = None) -> float:
    dets = predict(params, cfg, sequences, train_cfg.score_threshold, train_cfg.nms_iou, snippets)
    return map_sweep(dets, ground_truth_of(sequences), cfg.C_cls, [threshold]).map_per_threshold[0]


# ---------------------------------------------------------------- training loop


@dataclass
class LogRow:
    epoch: int
    l_total: float
    l_cb: float
    l_span: float
    val_map50: float

    def as_csv(self) -> str:
        return f"{self.epoch},{self.l_total!r},{self.l_cb!r},{self.l_span!r},{self.val_map50!r}"


@dataclass
class FitResult:
    log: list[LogRow]
    best: Checkpoint
    final: Checkpoint
    params: Params

    def log_csv(self) -> str:
        return ",".join(LOG_HEADER) + "\n" + "".join(r.as_csv() + "\n" for r in self.log)


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "cosine" and total_steps > 0:
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return cfg.learning_rate


def fit(
    train_set: Sequence[MotionSequence],
    val_set: Sequence[MotionSequence] | None,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    params: Params | None = None,
    class_names: Sequence[str] = (),
    data_seed: int | None = None,
    progress=None,
) -> FitResult:
    """Train end to end with the Hungarian loss.

    Each epoch shuffles (seeded), runs Adam over mini-batches and scores
    mAP@0.5 on ``val_set`` (the training set when ``val_set`` is None).
    The best-scoring parameters are kept.  Deterministic for a fixed seed.
    """
    train_set = list(train_set)
    max_spans = max((len(s.spans) for s in train_set), default=0)
    if max_spans >= model_cfg.N_a:
        raise ValueError(f"N_a={model_cfg.N_a} must exceed the largest span count in training ({max_spans})")
    params = init_params(model_cfg) if params is None else params
    stats = class_counts(train_set, model_cfg.C_cls, model_cfg.N_a, cfg.cb_beta, cfg.cb_gamma)
    eval_set = list(val_set) if val_set else train_set

    x_train = snippet_batch(train_set, model_cfg)
    x_eval = x_train if eval_set is train_set else snippet_batch(eval_set, model_cfg)
    targets = [(s.spans, s.duration) for s in train_set]

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history: list[LogRow] = []
    extra = dict(class_names=list(class_names), data_seed=data_seed, train_config=cfg)
    best = snapshot(model_cfg, params, stats, step=0, **extra)
    best_map = -1.0
    last_good = best

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            for p in params.values():
                p.zero_grad()
            try:
                with ad.Tape() as tape:
                    logits, spans, raw = forward_batch(x_train[idx], params, model_cfg)
                    loss = batch_loss(
                        split_batch(logits, spans, raw), [targets[i] for i in idx], stats, cfg.lambda_iou, cfg.lambda_l1
                    )
                grads = ad.backward(tape, loss.l_total)
                adam_step(params, grads, state, cfg, _lr_at(cfg, state.step, total_steps))
            except NonFiniteError as err:
                raise TrainingDiverged(f"training diverged in epoch {epoch}: {err}", last_good) from err
            sums += len(idx) * np.array([loss.l_total.item(), loss.l_cb.item(), loss.l_span.item()])
        sums /= len(train_set)

        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            try:
                val_map = evaluate_map(params, model_cfg, eval_set, cfg, snippets=x_eval)
            except NonFiniteError as err:
                raise TrainingDiverged(f"training diverged in epoch {epoch}: {err}", last_good) from err
        else:
            val_map = float("nan")
        row = LogRow(epoch, float(sums[0]), float(sums[1]), float(sums[2]), float(val_map))
        history.append(row)
        if progress is not None:
            progress(row)
        last_good = snapshot(model_cfg, params, stats, step=state.step, epoch=epoch, optimizer=state, **extra)
        if not math.isnan(val_map) and val_map > best_map:
            best_map = val_map
            best = last_good

    final = snapshot(model_cfg, params, stats, step=state.step, epoch=cfg.epochs, optimizer=state, **extra)
    if best_map < 0:
        best = final
    return FitResult(history, best, final, params)
