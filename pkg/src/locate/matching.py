"""Set-prediction objective: span overlap terms, class-balanced focal loss,
exact Hungarian assignment and the matched (Hungarian) loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabeledSpan
from .model import RawPredictionSet

PROB_FLOOR = 1e-12


class SpanError(ValueError):
    pass


# ---------------------------------------------------------------- spans


def _check_span(s, what: str) -> tuple[float, float]:
    start, end = float(s[0]), float(s[1])
    if not start < end:
        raise SpanError(f"degenerate {what} span [{start}, {end}]")
    return start, end


def span_iou(a, b) -> float:
    """Temporal IoU of two ``(start, end)`` intervals."""
    a0, a1 = _check_span(a, "first")
    b0, b1 = _check_span(b, "second")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """tIoU between every row of ``a [n, 2]`` and every row of ``b [m, 2]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(
        np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None
    )
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def span_terms(pred: Tensor, gt) -> tuple[Tensor, Tensor]:
    """Per-row ``(1 - gIoU, L1)`` for predicted spans ``[n, 2]`` against
    constant ground truth ``[n, 2]``.  Differentiable in ``pred``."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    ps, pe = pred[:, 0], pred[:, 1]
    gs, ge = Tensor(gt[:, 0]), Tensor(gt[:, 1])
    inter = ad.relu(ad.minimum(pe, ge) - ad.maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    hull = ad.maximum(pe, ge) - ad.minimum(ps, gs)
    giou = inter / union - (hull - union) / hull
    l_iou = 1.0 - giou
    l_l1 = (ps - gs).abs() + (pe - ge).abs()
    return l_iou, l_l1


class SpanLoss(NamedTuple):
    l_iou: float
    l_l1: float
    l_span: float


def span_loss(pred, gt, lambda_iou: float = 2.0, lambda_l1: float = 5.0) -> SpanLoss:
    """Duration-invariant gIoU term plus L1 on the endpoints."""
    _check_span(pred, "predicted")
    _check_span(gt, "ground-truth")
    l_iou, l_l1 = span_terms(Tensor(np.asarray(pred, dtype=np.float64).reshape(1, 2)), gt)
    li, l1 = l_iou.item(), l_l1.item()
    return SpanLoss(li, l1, lambda_iou * li + lambda_l1 * l1)


def pairwise_span_cost(gt: np.ndarray, pred: np.ndarray, lambda_iou: float, lambda_l1: float) -> np.ndarray:
    """``lambda_iou * (1 - gIoU) + lambda_l1 * L1`` for every (gt row, pred row)."""
    gs, ge = gt[:, None, 0], gt[:, None, 1]
    ps, pe = pred[None, :, 0], pred[None, :, 1]
    inter = np.clip(np.minimum(pe, ge) - np.maximum(ps, gs), 0.0, None)
    union = (pe - ps) + (ge - gs) - inter
    hull = np.maximum(pe, ge) - np.minimum(ps, gs)
    giou = inter / union - (hull - union) / hull
    l1 = np.abs(ps - gs) + np.abs(pe - ge)
    return lambda_iou * (1.0 - giou) + lambda_l1 * l1


# ---------------------------------------------------------------- class-balanced focal loss


def cb_weight(count: float, beta: float) -> float:
    """Inverse effective number of samples, ``(1 - beta) / (1 - beta**count)``."""
    if count < 1:
        raise ValueError(f"class count must be >= 1, got {count}")
    if beta == 0.0:
        return 1.0
    return (1.0 - beta) / (1.0 - beta**count)


@dataclass
class ClassStats:
    """Training-set span counts per class; index ``C_cls`` is the no-action class."""

    counts: list[float]
    beta: float = 0.99
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if any(c < 1 for c in self.counts):
            raise ValueError("every class count must be >= 1")
        self.counts = [float(c) for c in self.counts]

    @property
    def num_classes(self) -> int:
        """Real classes, excluding no-action."""
        return len(self.counts) - 1

    @property
    def no_action(self) -> int:
        return len(self.counts) - 1

    def weight(self, cls: int) -> float:
        return cb_weight(self.counts[cls], self.beta)

    def weights(self) -> np.ndarray:
        return np.array([self.weight(c) for c in range(len(self.counts))])

    def to_dict(self) -> dict:
        return {"counts": self.counts, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def uniform(cls, num_classes: int, beta: float = 0.0, gamma: float = 0.0) -> "ClassStats":
        return cls([1.0] * (num_classes + 1), beta, gamma)


def cb_focal_rows(logits: Tensor, targets: np.ndarray, weights: np.ndarray, gamma: float) -> Tensor:
    """Class-balanced sigmoid focal loss per row of ``logits [n, C+1]``.

    ``targets`` holds one class index per row and ``weights`` the class
    weight of that target.
    """
    targets = np.asarray(targets, dtype=np.intp)
    n, width = logits.shape
    sign = -np.ones((n, width))
    sign[np.arange(n), targets] = 1.0
    p = ad.clamp((logits * Tensor(sign)).sigmoid(), PROB_FLOOR, None)
    terms = p.log()
    if gamma != 0.0:
        terms = ad.power(1.0 - p, gamma) * terms
    return -(terms.sum(axis=1) * Tensor(np.asarray(weights, dtype=np.float64)))


def cb_focal_loss(logits, target_class: int, stats: ClassStats):
    """Loss of one prediction's logits toward ``target_class``.

    Returns a float for array input and a scalar Tensor for Tensor input.
    """
    as_float = not isinstance(logits, Tensor)
    z = ad.as_tensor(logits).reshape(1, -1)
    if not 0 <= target_class < z.shape[1]:
        raise ValueError(f"target class {target_class} outside [0, {z.shape[1]})")
    out = cb_focal_rows(z, np.array([target_class]), np.array([stats.weight(target_class)]), stats.gamma).sum()
    return out.item() if as_float else out


def _focal_parts(z: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-logit focal terms when the class is (pos) or is not (neg) the target."""

    def term(x):
        p = np.maximum(ad.logistic(x), PROB_FLOOR)
        t = np.log(p)
        if gamma != 0.0:
            t = (1.0 - p) ** gamma * t
        return -t

    return term(z), term(-z)


def pairwise_class_cost(logits: np.ndarray, classes: np.ndarray, stats: ClassStats) -> np.ndarray:
    """CB focal loss of every prediction (columns) toward every target class (rows)."""
    pos, neg = _focal_parts(logits, stats.gamma)  # [N_a, C+1]
    base = neg.sum(axis=1)  # all classes treated as negatives
    classes = np.asarray(classes, dtype=np.intp)
    w = stats.weights()[classes]
    per = base[None, :] - neg[:, classes].T + pos[:, classes].T
    return w[:, None] * per


# ---------------------------------------------------------------- matching


def match_cost(pred_logits, pred_span, gt_class: int, gt_span, stats: ClassStats,
               lambda_iou: float = 2.0, lambda_l1: float = 5.0) -> float:
    """Matching cost of one prediction against one padded ground-truth entry.

    No-action entries (``gt_class == C_cls``) cost 0, so only real spans
    steer the assignment.
    """
    if gt_class == stats.no_action:
        return 0.0
    cls = cb_focal_loss(np.asarray(pred_logits, dtype=np.float64), gt_class, stats)
    return cls + span_loss(pred_span, gt_span, lambda_iou, lambda_l1).l_span


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect assignment; returns ``perm`` with row i -> column perm[i].

    Among several optimal assignments the lexicographically smallest
    permutation is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.intp)

    # shortest augmenting paths with row/column potentials (1-based, column 0 is a sentinel)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.intp)  # column -> row
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            free = ~used
            free[0] = False
            cur = c[i0 - 1] - u[i0] - v[1:]
            cur = np.concatenate(([np.inf], cur))
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[match_col[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.intp)
    for j in range(1, n + 1):
        perm[match_col[j] - 1] = j - 1
    reduced = c - u[1:, None] - v[None, 1:]
    tol = 1e-10 * max(1.0, float(np.abs(c).max())) * n
    return _lexicographic_min(reduced <= tol, perm)


def _lexicographic_min(tight: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching of the equality graph.

    ``perm`` must already be a perfect matching inside ``tight``; every
    perfect matching of ``tight`` has the optimal cost.
    """
    n = len(perm)
    perm = perm.copy()
    row_of = np.empty(n, dtype=np.intp)
    row_of[perm] = np.arange(n)
    col_fixed = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if j >= perm[i]:
                break
            if col_fixed[j]:
                continue
            # re-route row_of[j] to the column freed by i via alternating paths
            path = _alternating_path(tight, perm, row_of, col_fixed, start_row=row_of[j], target=perm[i], banned=j)
            if path is None:
                continue
            for r, col in path:
                perm[r] = col
                row_of[col] = r
            perm[i] = j
            row_of[j] = i
            break
        col_fixed[perm[i]] = True
    return perm


def _alternating_path(tight, perm, row_of, col_fixed, start_row, target, banned):
    """BFS for rows reassignable so that ``start_row`` leaves its column and
    ``target`` column gets covered; returns (row, new_col) moves."""
    n = len(perm)
    parent: dict[int, tuple[int, int]] = {}  # col -> (row that takes it, previous col)
    frontier = [(start_row, -1)]
    seen = np.zeros(n, dtype=bool)
    seen[banned] = True
    while frontier:
        nxt = []
        for row, came_from in frontier:
            for col in np.flatnonzero(tight[row]):
                if seen[col] or col_fixed[col]:
                    continue
                seen[col] = True
                parent[col] = (row, came_from)
                if col == target:
                    moves = []
                    c = col
                    while c != -1:
                        r, prev = parent[c]
                        moves.append((r, c))
                        c = prev
                    return moves
                nxt.append((row_of[col], col))
        frontier = nxt
    return None


# ---------------------------------------------------------------- Hungarian loss


@dataclass
class PaddedGroundTruth:
    classes: np.ndarray  # [N_a], sentinel = C_cls
    spans: np.ndarray  # [n_real, 2] normalized
    num_real: int


def pad_ground_truth(gts: Sequence[LabeledSpan], duration: float, num_queries: int, num_classes: int) -> PaddedGroundTruth:
    if len(gts) > num_queries:
        raise ValueError(
            f"{len(gts)} ground-truth spans exceed the {num_queries} action queries; raise N_a"
        )
    classes = np.full(num_queries, num_classes, dtype=np.intp)
    spans = np.zeros((len(gts), 2))
    for i, g in enumerate(gts):
        if not 0 <= g.class_id < num_classes:
            raise ValueError(f"ground-truth class {g.class_id} outside [0, {num_classes})")
        classes[i] = g.class_id
        spans[i] = (g.t_start / duration, g.t_end / duration)
    spans = np.clip(spans, 0.0, 1.0)
    if np.any(spans[:, 0] >= spans[:, 1]):
        raise ValueError("degenerate ground-truth span after normalization")
    return PaddedGroundTruth(classes, spans, len(gts))


@dataclass
class LossBreakdown:
    l_cb: Tensor
    l_iou: Tensor
    l_l1: Tensor
    l_span: Tensor
    l_total: Tensor
    pairs: list[dict] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_cb", "l_iou", "l_l1", "l_span", "l_total")}


def cost_matrix(logits: np.ndarray, spans: np.ndarray, gt: PaddedGroundTruth, stats: ClassStats,
                lambda_iou: float, lambda_l1: float) -> np.ndarray:
    n_a = logits.shape[0]
    cost = np.zeros((n_a, n_a))
    n = gt.num_real
    if n:
        cost[:n] = pairwise_class_cost(logits, gt.classes[:n], stats) + pairwise_span_cost(
            gt.spans, spans, lambda_iou, lambda_l1
        )
    return cost


def hungarian_loss(
    preds: RawPredictionSet,
    gts: Sequence[LabeledSpan],
    seq_duration: float,
    stats: ClassStats,
    lambda_iou: float = 2.0,
    lambda_l1: float = 5.0,
) -> tuple[LossBreakdown, np.ndarray]:
    """Loss of one sequence's predictions under the optimal matching.

    Returns the breakdown and the assignment (padded ground-truth row ->
    prediction index).  The assignment is held fixed for differentiation.
    """
    logits, spans = preds.class_logits, preds.spans
    n_a, width = logits.shape
    num_classes = width - 1
    if stats.num_classes != num_classes:
        raise ValueError(f"class stats cover {stats.num_classes} classes, predictions {num_classes}")
    gt = pad_ground_truth(gts, seq_duration, n_a, num_classes)
    cost = cost_matrix(logits.data, spans.data, gt, stats, lambda_iou, lambda_l1)
    perm = hungarian(cost)

    # target class per prediction index
    targets = np.full(n_a, num_classes, dtype=np.intp)
    targets[perm] = gt.classes
    weights = stats.weights()[targets]
    cb_rows = cb_focal_rows(logits, targets, weights, stats.gamma)
    l_cb = cb_rows.sum()

    n = gt.num_real
    if n:
        matched = ad.take(spans, perm[:n], axis=0)
        iou_rows, l1_rows = span_terms(matched, gt.spans)
        l_iou, l_l1 = iou_rows.sum(), l1_rows.sum()
        l_span = ad.scale(l_iou, lambda_iou) + ad.scale(l_l1, lambda_l1)
    else:
        iou_rows = l1_rows = None
        l_iou = l_l1 = l_span = Tensor(0.0)
    l_total = l_cb + l_span

    pairs = []
    for row in range(n_a):
        col = int(perm[row])
        entry = {"row": row, "pred": col, "class": int(gt.classes[row]), "cb": float(cb_rows.data[col])}
        if row < n:
            entry["iou_loss"] = float(iou_rows.data[row])
            entry["l1"] = float(l1_rows.data[row])
        pairs.append(entry)
    return LossBreakdown(l_cb, l_iou, l_l1, l_span, l_total, pairs), perm


def batch_loss(
    preds: Sequence[RawPredictionSet],
    targets: Sequence[tuple[Sequence[LabeledSpan], float]],
    stats: ClassStats,
    lambda_iou: float = 2.0,
    lambda_l1: float = 5.0,
) -> LossBreakdown:
    """Mean Hungarian loss over sequences, summed in sequence order."""
    parts = [
        hungarian_loss(p, gts, dur, stats, lambda_iou, lambda_l1)[0] for p, (gts, dur) in zip(preds, targets)
    ]
    scale = 1.0 / len(parts)

    def mean(attr):
        total = getattr(parts[0], attr)
        for part in parts[1:]:
            total = total + getattr(part, attr)
        return ad.scale(total, scale)

    return LossBreakdown(mean("l_cb"), mean("l_iou"), mean("l_l1"), mean("l_span"), mean("l_total"))
