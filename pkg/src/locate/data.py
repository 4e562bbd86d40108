"""Skeleton motion sequences: validation, canonical normalization,
snippet construction, label grouping, synthetic generation and JSON I/O.

Joint order follows the 22-joint SMPL body skeleton (hands excluded)::

     0 pelvis      1 l_hip      2 r_hip      3 spine1     4 l_knee     5 r_knee
     6 spine2      7 l_ankle    8 r_ankle    9 spine3    10 l_foot    11 r_foot
    12 neck       13 l_collar  14 r_collar  15 head      16 l_shoulder 17 r_shoulder
    18 l_elbow    19 r_elbow   20 l_wrist   21 r_wrist
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

NUM_JOINTS = 22
PELVIS = 0
L_HIP, R_HIP = 1, 2
L_SHOULDER, R_SHOULDER = 16, 17

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
)  # fmt: skip

# Approximate rest pose of a mean-shape SMPL skeleton, metres, pelvis at origin.
NEUTRAL_POSE = np.array(
    [
        [0.00, 0.00, 0.00],
        [0.06, -0.09, 0.00],
        [-0.06, -0.09, 0.00],
        [0.00, 0.11, -0.01],
        [0.11, -0.47, 0.00],
        [-0.11, -0.47, 0.00],
        [0.00, 0.25, 0.01],
        [0.09, -0.87, -0.04],
        [-0.09, -0.87, -0.04],
        [0.00, 0.31, 0.02],
        [0.12, -0.93, 0.08],
        [-0.12, -0.93, 0.08],
        [0.00, 0.52, -0.01],
        [0.08, 0.43, 0.00],
        [-0.08, 0.43, 0.00],
        [0.00, 0.58, 0.05],
        [0.19, 0.46, -0.01],
        [-0.19, 0.46, -0.01],
        [0.45, 0.44, -0.03],
        [-0.45, 0.44, -0.03],
        [0.71, 0.45, -0.03],
        [-0.71, 0.45, -0.03],
    ]
)

# Joint groups animated by synthetic motifs.  None of them touch the joints
# that define the canonical frame (pelvis, hips, shoulders).
MOTIF_GROUPS = (
    (18, 20),  # left arm
    (19, 21),  # right arm
    (4, 7, 10),  # left leg
    (5, 8, 11),  # right leg
    (12, 15),  # neck and head
    (3, 6, 9),  # spine
    (13, 14),  # collars
)


class DataError(ValueError):
    """Invalid motion data or dataset file."""


@dataclass(frozen=True)
class LabeledSpan:
    class_id: int
    t_start: float
    t_end: float

    def __post_init__(self):
        if self.class_id < 0:
            raise DataError(f"negative class id {self.class_id}")
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise DataError("span times must be finite")
        if not self.t_start < self.t_end:
            raise DataError(f"span ({self.t_start}, {self.t_end}): t_end <= t_start")

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """``frames`` is an F x 22 x 3 array of joint positions in metres."""

    id: str
    fps: float
    frames: np.ndarray
    spans: tuple[LabeledSpan, ...] = ()
    num_classes: int | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise DataError(f"sequence {self.id!r}: frames must be F x 22 x 3, got {frames.shape}")
        if frames.shape[1] != NUM_JOINTS:
            raise DataError(f"sequence {self.id!r}: expected 22 joints, got {frames.shape[1]}")
        if frames.shape[0] < 1:
            raise DataError(f"sequence {self.id!r}: no frames")
        if not np.all(np.isfinite(frames)):
            raise DataError(f"sequence {self.id!r}: non-finite joint coordinates")
        if not self.fps > 0:
            raise DataError(f"sequence {self.id!r}: fps must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "spans", tuple(self.spans))
        duration = self.duration
        for i, span in enumerate(self.spans):
            if span.t_start < 0 or span.t_end > duration + 1e-9:
                raise DataError(
                    f"sequence {self.id!r} span {i}: ({span.t_start}, {span.t_end}) "
                    f"outside [0, {duration}]"
                )
            if self.num_classes is not None and span.class_id >= self.num_classes:
                raise DataError(
                    f"sequence {self.id!r} span {i}: class {span.class_id} >= {self.num_classes}"
                )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps

    def __eq__(self, other) -> bool:
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (
            self.id == other.id
            and self.fps == other.fps
            and self.spans == other.spans
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )


@dataclass(frozen=True, eq=False)
class SnippetTensor:
    """T x (66 * N_f) model input; row i is snippet i flattened frame-major."""

    data: np.ndarray
    snippet_frames: int
    source_duration: float
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != NUM_JOINTS * 3 * self.snippet_frames:
            raise DataError(f"snippet data must be T x {66 * self.snippet_frames}, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("non-finite snippet values")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]


@dataclass
class Dataset:
    class_names: list[str]
    sequences: list[MotionSequence]

    def __iter__(self) -> Iterator[MotionSequence]:
        return iter(self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.class_names == other.class_names and self.sequences == other.sequences


# ---------------------------------------------------------------- normalization


def normalize_skeleton(frames: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Rigidly move every frame into the body-centred canonical frame.

    The pelvis goes to the origin, the left-to-right hip vector becomes +x,
    and the pelvis-to-mid-shoulder (torso) vector, made orthogonal to the hip
    axis, becomes +y.  z completes a right-handed basis.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (NUM_JOINTS, 3):
        raise DataError(f"expected F x 22 x 3 frames, got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise DataError("non-finite joint coordinates")

    centred = frames - frames[:, PELVIS : PELVIS + 1, :]
    hip = centred[:, R_HIP] - centred[:, L_HIP]
    hip_norm = np.linalg.norm(hip, axis=1)
    bad = np.flatnonzero(hip_norm <= eps)
    if bad.size:
        raise DataError(f"degenerate skeleton at frame {int(bad[0])}: hip joints coincide")
    x_axis = hip / hip_norm[:, None]

    torso = 0.5 * (centred[:, L_SHOULDER] + centred[:, R_SHOULDER])
    torso = torso - np.sum(torso * x_axis, axis=1, keepdims=True) * x_axis
    torso_norm = np.linalg.norm(torso, axis=1)
    bad = np.flatnonzero(torso_norm <= eps)
    if bad.size:
        raise DataError(f"degenerate skeleton at frame {int(bad[0])}: shoulders lie on the hip axis")
    y_axis = torso / torso_norm[:, None]
    z_axis = np.cross(x_axis, y_axis)

    basis = np.stack([x_axis, y_axis, z_axis], axis=1)  # F x 3 x 3, rows are axes
    return np.einsum("fjc,fkc->fjk", centred, basis)


# ---------------------------------------------------------------- snippets


def snippet_starts(num_frames: int, snippet_frames: int, length: int) -> np.ndarray:
    """First frame of each of ``length`` snippets, spread evenly over the sequence."""
    if length < 1:
        raise DataError(f"sequence length T must be >= 1, got {length}")
    if snippet_frames < 1:
        raise DataError(f"snippet frame count must be >= 1, got {snippet_frames}")
    if num_frames < snippet_frames:
        raise DataError(f"sequence has {num_frames} frames, fewer than one snippet ({snippet_frames})")
    if length == 1:
        return np.zeros(1, dtype=np.int64)
    span = num_frames - snippet_frames
    # round half to even keeps this identical to Python's round()
    return np.array([round(i * span / (length - 1)) for i in range(length)], dtype=np.int64)


def snippetize(seq: MotionSequence, snippet_frames: int, length: int) -> SnippetTensor:
    """Cut ``length`` snippets of ``snippet_frames`` contiguous frames.

    Long sequences drop the frames between snippets; short ones yield
    overlapping snippets.  Values are copied, never interpolated.
    """
    starts = snippet_starts(seq.num_frames, snippet_frames, length)
    idx = starts[:, None] + np.arange(snippet_frames)[None, :]
    data = seq.frames[idx].reshape(length, -1)
    return SnippetTensor(data, snippet_frames, seq.duration, starts)


def preprocess(seq: MotionSequence, snippet_frames: int, length: int) -> SnippetTensor:
    """Normalize then snippetize."""
    normed = MotionSequence(seq.id, seq.fps, normalize_skeleton(seq.frames), seq.spans)
    return snippetize(normed, snippet_frames, length)


# ---------------------------------------------------------------- labels


@dataclass(frozen=True)
class LabelMap:
    mapping: dict[str, int]
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "mapping", dict(self.mapping))
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("class names must be unique")
        for src, cid in self.mapping.items():
            if not 0 <= cid < len(self.class_names):
                raise DataError(f"label {src!r} maps to class {cid}, outside [0, {len(self.class_names)})")


def map_labels(
    spans: Iterable[tuple[str, float, float]], label_map: LabelMap
) -> tuple[list[LabeledSpan], int]:
    """Relabel ``(label, start, end)`` spans; unmapped labels are dropped.

    Returns the mapped spans and the number dropped.
    """
    out = []
    dropped = 0
    for label, start, end in spans:
        cid = label_map.mapping.get(label)
        if cid is None:
            dropped += 1
            continue
        out.append(LabeledSpan(cid, float(start), float(end)))
    if dropped:
        log.debug("map_labels dropped %d unmapped spans", dropped)
    return out, dropped


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    num_sequences: int = 20
    num_classes: int = 5
    duration_range: tuple[float, float] = (8.0, 14.0)
    spans_per_sequence_range: tuple[int, int] = (1, 3)
    fps: float = 30.0
    noise_std: float = 0.005
    seed: int = 0
    span_duration_range: tuple[float, float] = (1.5, 3.5)
    overlap_prob: float = 0.25

    def validate(self) -> None:
        if self.num_sequences < 1:
            raise DataError("num_sequences must be >= 1")
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise DataError(f"bad duration range {self.duration_range}")
        smin, smax = self.spans_per_sequence_range
        if not 0 <= smin <= smax:
            raise DataError(f"bad spans-per-sequence range {self.spans_per_sequence_range}")
        dmin, dmax = self.span_duration_range
        if not 0 < dmin <= dmax:
            raise DataError(f"bad span duration range {self.span_duration_range}")
        if not self.fps > 0:
            raise DataError("fps must be positive")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if smax * dmin > lo:
            raise DataError(
                f"duration {lo}s is too short for {smax} spans of at least {dmin}s each"
            )
        if not 0 <= self.overlap_prob <= 1:
            raise DataError("overlap_prob must be in [0, 1]")


def motif(class_id: int, num_frames: int, fps: float) -> np.ndarray:
    """Joint displacement (num_frames x 22 x 3) for one occurrence of a class.

    Each class animates one joint group with its own frequency, amplitude and
    movement plane; distal joints of a group swing further.  Time is measured
    from the start of the occurrence, so every occurrence is identical.
    """
    n_groups = len(MOTIF_GROUPS)
    group = MOTIF_GROUPS[class_id % n_groups]
    cycle = class_id // n_groups
    freq = 0.6 + 0.25 * (class_id % n_groups) + 0.9 * cycle
    amp = 0.10 + 0.04 * ((class_id + cycle) % 3)
    plane = (class_id + cycle) % 3
    tau = np.arange(num_frames) / fps
    phase = 2.0 * np.pi * freq * tau
    out = np.zeros((num_frames, NUM_JOINTS, 3))
    for rank, joint in enumerate(group, start=1):
        out[:, joint, plane] += amp * rank * np.sin(phase)
        out[:, joint, (plane + 1) % 3] += 0.5 * amp * rank * (1.0 - np.cos(phase))
    return out


def _layout_spans(rng: np.random.Generator, cfg: SyntheticConfig, duration: float, n: int) -> list[tuple[float, float]]:
    dmin, dmax = cfg.span_duration_range
    lengths = rng.uniform(dmin, dmax, size=n)
    total = lengths.sum()
    if total > duration:
        lengths = dmin + (lengths - dmin) * (duration - n * dmin) / (total - n * dmin)
    free = max(duration - lengths.sum(), 0.0)
    gaps = rng.dirichlet(np.ones(n + 1)) * free
    spans = []
    cursor = 0.0
    for i in range(n):
        start = cursor + gaps[i]
        spans.append([start, start + lengths[i]])
        cursor = start + lengths[i]
    # pull some spans back so they overlap their predecessor, never creating
    # a point in time covered by three spans
    for i in range(1, n):
        if rng.random() >= cfg.overlap_prob:
            continue
        prev_start, prev_end = spans[i - 1]
        floor = spans[i - 2][1] if i >= 2 else 0.0
        floor = max(floor, prev_start + 0.25 * (prev_end - prev_start))
        ceiling = min(spans[i][0], prev_end)
        if floor < ceiling:
            shift = spans[i][0] - rng.uniform(floor, ceiling)
            spans[i][0] -= shift
            spans[i][1] -= shift
    return [(s, e) for s, e in spans]


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic labeled motion sequences built from per-class motifs."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    class_names = [f"action_{k}" for k in range(cfg.num_classes)]
    sequences = []
    for s in range(cfg.num_sequences):
        duration = rng.uniform(*cfg.duration_range)
        num_frames = max(1, int(round(duration * cfg.fps)))
        n_spans = int(rng.integers(cfg.spans_per_sequence_range[0], cfg.spans_per_sequence_range[1] + 1))
        layout = _layout_spans(rng, cfg, num_frames / cfg.fps, n_spans)
        classes = rng.integers(0, cfg.num_classes, size=n_spans)

        frames = np.broadcast_to(NEUTRAL_POSE, (num_frames, NUM_JOINTS, 3)).copy()
        spans = []
        for (start, end), cid in zip(layout, classes):
            f0 = min(int(round(start * cfg.fps)), num_frames - 1)
            f1 = min(max(int(round(end * cfg.fps)), f0 + 1), num_frames)
            frames[f0:f1] += motif(int(cid), f1 - f0, cfg.fps)
            spans.append(LabeledSpan(int(cid), f0 / cfg.fps, f1 / cfg.fps))
        if cfg.noise_std > 0:
            frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
        sequences.append(
            MotionSequence(f"seq{s:04d}", cfg.fps, frames, tuple(spans), cfg.num_classes)
        )
    return Dataset(class_names, sequences)


# ---------------------------------------------------------------- file I/O


def _seq_to_json(seq: MotionSequence, fps: float) -> dict:
    out = {
        "id": seq.id,
        "frames": seq.frames.tolist(),
        "spans": [{"class": s.class_id, "start": s.t_start, "end": s.t_end} for s in seq.spans],
    }
    if seq.fps != fps:
        out["fps"] = seq.fps
    return out


def dumps_dataset(dataset: Dataset) -> str:
    fps = dataset.sequences[0].fps if dataset.sequences else 30.0
    doc = {
        "fps": fps,
        "class_names": list(dataset.class_names),
        "sequences": [_seq_to_json(s, fps) for s in dataset.sequences],
    }
    return json.dumps(doc, separators=(",", ":"))


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset as one JSON document (floats in shortest round-trip form)."""
    Path(path).write_text(dumps_dataset(dataset))


def _field(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    return obj[key]


def loads_dataset(text: str, min_frames: int = 1, source: str = "<string>") -> Dataset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise DataError(f"{source}: malformed JSON at line {err.lineno} column {err.colno}: {err.msg}") from None
    fps = float(_field(doc, "fps", source))
    class_names = [str(c) for c in _field(doc, "class_names", source)]
    num_classes = len(class_names)
    sequences = []
    for i, raw in enumerate(_field(doc, "sequences", source)):
        where = f"{source}: sequences[{i}]"
        sid = str(_field(raw, "id", where))
        try:
            frames = np.array(_field(raw, "frames", where), dtype=np.float64)
        except (TypeError, ValueError) as err:
            raise DataError(f"{where}.frames: {err}") from None
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise DataError(f"{where}.frames: expected F x 22 x 3 nesting, got shape {frames.shape}")
        if frames.shape[1] != NUM_JOINTS:
            raise DataError(f"{where}.frames: expected 22 joints, got {frames.shape[1]}")
        if frames.shape[0] < min_frames:
            raise DataError(f"{where}: {frames.shape[0]} frames, need at least {min_frames}")
        spans = []
        for j, rs in enumerate(_field(raw, "spans", where)):
            swhere = f"{where}.spans[{j}]"
            try:
                spans.append(
                    LabeledSpan(int(_field(rs, "class", swhere)), float(_field(rs, "start", swhere)), float(_field(rs, "end", swhere)))
                )
            except DataError as err:
                raise DataError(f"{swhere}: {err}") from None
        try:
            sequences.append(MotionSequence(sid, float(raw.get("fps", fps)), frames, tuple(spans), num_classes))
        except DataError as err:
            raise DataError(f"{where}: {err}") from None
    return Dataset(class_names, sequences)


def load_dataset(path, min_frames: int = 1) -> Dataset:
    path = Path(path)
    return loads_dataset(path.read_text(), min_frames=min_frames, source=str(path))


def class_span_counts(sequences: Sequence[MotionSequence], num_classes: int) -> list[int]:
    counts = [0] * num_classes
    for seq in sequences:
        for span in seq.spans:
            counts[span.class_id] += 1
    return counts
