"""Detection decoding, temporal NMS, AP/mAP over tIoU thresholds,
confusion matrices and inter-annotator agreement."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import logistic
from .data import LabeledSpan
from .model import RawPredictionSet

DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class Detection:
    seq_id: str
    class_id: int
    t_start: float
    t_end: float
    score: float = 1.0

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"detection span [{self.t_start}, {self.t_end}] is degenerate")
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")

    def to_json(self) -> dict:
        return {"seq": self.seq_id, "class": self.class_id, "start": self.t_start, "end": self.t_end, "score": self.score}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Detection":
        return cls(str(obj["seq"]), int(obj["class"]), float(obj["start"]), float(obj["end"]), float(obj.get("score", 1.0)))


GroundTruth = tuple[str, LabeledSpan]


def tiou(a0: float, a1: float, b0: float, b1: float) -> float:
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def decode_predictions(raw: RawPredictionSet, seq_id: str, seq_duration: float, score_threshold: float = 0.0) -> list[Detection]:
    """Turn one sequence's raw query outputs into scored detections.

    A query reports its best real class when that class's sigmoid score
    reaches ``score_threshold`` and is not beaten by the no-action score.
    """
    logits = np.asarray(raw.class_logits.data if hasattr(raw.class_logits, "data") else raw.class_logits)
    spans = np.asarray(raw.spans.data if hasattr(raw.spans, "data") else raw.spans)
    probs = logistic(logits)
    real, no_action = probs[:, :-1], probs[:, -1]
    dets = []
    for q in range(len(probs)):
        cls = int(np.argmax(real[q]))
        score = float(real[q, cls])
        if score < score_threshold or no_action[q] > score:
            continue
        start, end = float(spans[q, 0]) * seq_duration, float(spans[q, 1]) * seq_duration
        if not start < end:
            continue
        dets.append(Detection(seq_id, cls, start, end, score))
    return dets


def _rank_key(d: Detection):
    return (-d.score, d.t_start, d.seq_id, d.t_end)


def temporal_nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class (and per-sequence) suppression of overlapping detections."""
    order = sorted(range(len(dets)), key=lambda i: (_rank_key(dets[i]), i))
    kept: list[Detection] = []
    by_group: dict[tuple[str, int], list[Detection]] = {}
    for i in order:
        d = dets[i]
        group = by_group.setdefault((d.seq_id, d.class_id), [])
        if any(tiou(d.t_start, d.t_end, k.t_start, k.t_end) >= iou_threshold for k in group):
            continue
        group.append(d)
        kept.append(d)
    return kept


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], threshold: float, presorted: bool = False
) -> tuple[list[Detection], np.ndarray]:
    """Greedy matching of ranked detections to unmatched same-sequence ground truth.

    Each detection takes the unmatched ground truth with the highest tIoU
    (first one on ties) if that tIoU reaches ``threshold``.  Returns the
    ranked detections and a TP flag per rank.
    """
    ranked = list(dets) if presorted else sorted(dets, key=_rank_key)
    by_seq: dict[str, list[int]] = {}
    for gi, (sid, _) in enumerate(gts):
        by_seq.setdefault(sid, []).append(gi)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(ranked), dtype=bool)
    for r, d in enumerate(ranked):
        best, best_iou = -1, -1.0
        for gi in by_seq.get(d.seq_id, ()):
            if used[gi]:
                continue
            g = gts[gi][1]
            o = tiou(d.t_start, d.t_end, g.t_start, g.t_end)
            if o > best_iou:
                best, best_iou = gi, o
        if best >= 0 and best_iou >= threshold:
            used[best] = True
            tp[r] = True
    return ranked, tp


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    threshold: float,
    interpolate: bool = True,
    presorted: bool = False,
) -> float:
    """AP of one class's detections at one tIoU threshold.

    With ``interpolate`` the precision at each true positive is replaced by
    the best precision reached at any equal or higher recall.
    """
    if not gts:
        return 0.0
    if not dets:
        return 0.0
    _, tp = match_detections(dets, gts, threshold, presorted)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    if interpolate:
        precision = np.maximum.accumulate(precision[::-1])[::-1]
    return float(precision[tp].sum() / len(gts))


@dataclass
class ConfusionMatrix:
    """Rows: ground-truth class (last row = detection matched nothing);
    columns: predicted class (last column = ground truth never detected)."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    def column_normalized(self) -> np.ndarray:
        totals = self.counts.sum(axis=0, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(totals > 0, self.counts / np.maximum(totals, 1), 0.0)

    def to_json(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


@dataclass
class EvalReport:
    thresholds: list[float]
    ap: np.ndarray  # [C_cls, len(thresholds)]
    map_per_threshold: list[float]
    avg_map: float
    counts: list[int]
    class_names: list[str] = field(default_factory=list)
    confusion: ConfusionMatrix | None = None

    def map_at(self, threshold: float) -> float:
        for t, m in zip(self.thresholds, self.map_per_threshold):
            if abs(t - threshold) < 1e-9:
                return m
        raise KeyError(f"threshold {threshold} not evaluated")

    def to_json(self) -> dict:
        out = {
            "thresholds": list(self.thresholds),
            "class_names": list(self.class_names),
            "gt_counts": list(self.counts),
            "ap": self.ap.tolist(),
            "map_per_threshold": list(self.map_per_threshold),
            "avg_map": self.avg_map,
        }
        if self.confusion is not None:
            out["confusion"] = self.confusion.to_json()
        return out

    @classmethod
    def from_json(cls, doc: Mapping) -> "EvalReport":
        conf = doc.get("confusion")
        return cls(
            thresholds=[float(t) for t in doc["thresholds"]],
            ap=np.array(doc["ap"], dtype=np.float64).reshape(len(doc["gt_counts"]), len(doc["thresholds"])),
            map_per_threshold=[float(m) for m in doc["map_per_threshold"]],
            avg_map=float(doc["avg_map"]),
            counts=[int(c) for c in doc["gt_counts"]],
            class_names=list(doc.get("class_names", [])),
            confusion=None if conf is None else ConfusionMatrix(np.array(conf, dtype=np.int64)),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "gt_count"] + [f"ap@{t:g}" for t in self.thresholds] + ["avg"])
        for c in range(self.ap.shape[0]):
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            row = self.ap[c]
            writer.writerow([name, self.counts[c]] + [f"{v:.6f}" for v in row] + [f"{row.mean():.6f}"])
        writer.writerow(["mAP", sum(self.counts)] + [f"{m:.6f}" for m in self.map_per_threshold] + [f"{self.avg_map:.6f}"])
        return buf.getvalue()


def map_sweep(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    num_classes: int,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    interpolate: bool = True,
    presorted: bool = False,
    class_names: Sequence[str] = (),
) -> EvalReport:
    """Per-class AP at every threshold, then mAP over classes that have ground truth."""
    dets_by_class: list[list[Detection]] = [[] for _ in range(num_classes)]
    gts_by_class: list[list[GroundTruth]] = [[] for _ in range(num_classes)]
    for d in dets:
        if 0 <= d.class_id < num_classes:
            dets_by_class[d.class_id].append(d)
    for g in gts:
        gts_by_class[g[1].class_id].append(g)
    if not presorted:
        # canonical ground-truth order keeps results independent of input order
        for lst in gts_by_class:
            lst.sort(key=lambda g: (g[0], g[1].t_start, g[1].t_end))
    ap = np.zeros((num_classes, len(thresholds)))
    for c in range(num_classes):
        for k, t in enumerate(thresholds):
            ap[c, k] = average_precision(dets_by_class[c], gts_by_class[c], t, interpolate, presorted)
    counts = [len(g) for g in gts_by_class]
    present = [c for c in range(num_classes) if counts[c] > 0]
    if present:
        per_t = [float(np.mean(ap[present, k])) for k in range(len(thresholds))]
    else:
        per_t = [0.0] * len(thresholds)
    avg = float(np.mean(per_t)) if per_t else 0.0
    return EvalReport(list(thresholds), ap, per_t, avg, counts, list(class_names))


def confusion_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int, threshold: float = 0.5) -> ConfusionMatrix:
    """Class-agnostic matching of each detection to its best-overlapping ground truth.

    A ground-truth span may absorb several detections.  Ground truth that no
    detection reaches is counted in the last column.
    """
    counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    by_seq: dict[str, list[LabeledSpan]] = {}
    for sid, g in gts:
        by_seq.setdefault(sid, []).append(g)
    hit: set[tuple[str, int]] = set()
    for d in dets:
        best, best_iou = -1, -1.0
        for gi, g in enumerate(by_seq.get(d.seq_id, ())):
            o = tiou(d.t_start, d.t_end, g.t_start, g.t_end)
            if o > best_iou:
                best, best_iou = gi, o
        if best >= 0 and best_iou >= threshold:
            counts[by_seq[d.seq_id][best].class_id, d.class_id] += 1
            hit.add((d.seq_id, best))
        else:
            counts[num_classes, d.class_id] += 1
    for sid, lst in by_seq.items():
        for gi, g in enumerate(lst):
            if (sid, gi) not in hit:
                counts[g.class_id, num_classes] += 1
    return ConfusionMatrix(counts)


def human_agreement_map(
    annotations: Mapping[str, Sequence[Sequence[LabeledSpan]]],
    num_classes: int,
    threshold: float = 0.5,
    average_over_references: bool = False,
) -> float:
    """mAP of extra annotators' spans scored against one reference annotator.

    ``annotations`` maps a sequence id to its annotation sets; set 0 is the
    reference unless ``average_over_references`` averages over every choice.
    """
    if not annotations:
        raise ValueError("no annotated sequences")
    for sid, sets in annotations.items():
        if len(sets) < 2:
            raise ValueError(f"sequence {sid!r} has {len(sets)} annotation set(s); need at least 2")
    n_sets = min(len(s) for s in annotations.values())
    refs = range(n_sets) if average_over_references else [0]
    results = []
    for ref in refs:
        gts: list[GroundTruth] = []
        flat: list[tuple[int, float, str, Detection]] = []
        for sid in sorted(annotations):
            sets = annotations[sid]
            gts.extend((sid, s) for s in sets[ref])
            for a, spans in enumerate(sets):
                if a == ref:
                    continue
                flat.extend((a, s.t_start, sid, Detection(sid, s.class_id, s.t_start, s.t_end, 1.0)) for s in spans)
        flat.sort(key=lambda x: (x[0], x[1], x[2]))
        dets = [x[3] for x in flat]
        report = map_sweep(dets, gts, num_classes, [threshold], presorted=True)
        results.append(report.map_per_threshold[0])
    return float(np.mean(results))


# ---------------------------------------------------------------- files


DETECTIONS_HEADER = "# locate detections v1: seq, class, start, end, score"


def dumps_detections(dets: Iterable[Detection]) -> str:
    lines = [DETECTIONS_HEADER]
    lines.extend(json.dumps(d.to_json(), separators=(",", ":")) for d in dets)
    return "\n".join(lines) + "\n"


def write_detections(dets: Iterable[Detection], path) -> None:
    Path(path).write_text(dumps_detections(dets))


def read_detections(path) -> list[Detection]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(Detection.from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError) as err:
            raise ValueError(f"{path}:{lineno}: bad detection record ({err})") from None
    return out


def ground_truth_of(sequences) -> list[GroundTruth]:
    return [(seq.id, span) for seq in sequences for span in seq.spans]
