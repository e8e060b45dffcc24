"""Semantic, panoptic, and corruption-robustness evaluation.

Accumulators (confusion matrices, panoptic segment stats) merge
associatively in exact integer arithmetic, so sharded evaluation over scans
reproduces whole-corpus results bit for bit.  Scores are fractions in
[0, 1]; conversion to percentages happens only at presentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBaselineError,
    DegenerateCleanError,
    InconsistentInputError,
    InvalidInputError,
    InvalidLabelError,
)
from .panoptic import PanopticLabels

MATCH_IOU_THRESHOLD = 0.5
"""Segments of the same class match when IoU exceeds this (strict >).

The strict > 0.5 rule is what makes segment matching unique, which the
panoptic-quality formula assumes.
"""


class ConfusionMatrix:
    """Q x Q integer counts, rows = ground truth, cols = prediction."""

    def __init__(self, num_classes: int, ignore_id: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) \
            if counts is None else np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise InvalidInputError("counts shape must be (Q, Q)")

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes or other.ignore_id != self.ignore_id:
            raise InconsistentInputError("cannot merge confusion matrices of different spaces")
        return ConfusionMatrix(self.num_classes, self.ignore_id, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(gt: np.ndarray, pred: np.ndarray, num_classes: int,
                         ignore_id: int) -> ConfusionMatrix:
    """Count (gt, pred) pairs for non-ignored ground truth.

    Predictions must be real class ids; a prediction equal to ``ignore_id``
    at a non-ignored point has no defined cell and raises.
    """
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise InconsistentInputError("gt and pred must be equal-length 1-D arrays")
    keep = gt != ignore_id
    g = gt[keep]
    p = pred[keep]
    if g.size and ((g < 0).any() or (g >= num_classes).any()):
        raise InvalidLabelError("ground-truth id outside [0, Q)")
    if p.size and ((p < 0).any() or (p >= num_classes).any()):
        raise InvalidLabelError("prediction id outside [0, Q)")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(num_classes, ignore_id, counts.reshape(num_classes, num_classes))


@dataclass
class SemanticScores:
    """Per-class IoU/Acc plus their means over classes that actually occur."""

    per_class_iou: np.ndarray     # NaN where the class is absent from gt and pred
    per_class_acc: np.ndarray     # NaN where the class has no ground truth
    miou: float | None
    macc: float | None
    present: np.ndarray           # gt or pred present


def semantic_scores(cm: ConfusionMatrix) -> SemanticScores:
    """IoU and accuracy from a confusion matrix.

    ``IoU_c = TP_c / (TP_c + FP_c + FN_c)``.  Classes absent from both
    ground truth and prediction are excluded from the means; an empty
    matrix reports absent means (None), not zero.  Accuracy is per-class
    recall, defined only where ground truth exists.
    """
    counts = cm.counts.astype(float)
    diag = np.diag(counts)
    gt_sum = counts.sum(axis=1)
    pred_sum = counts.sum(axis=0)
    union = gt_sum + pred_sum - diag
    present = union > 0
    gt_present = gt_sum > 0

    iou = np.full(cm.num_classes, np.nan)
    np.divide(diag, union, out=iou, where=present)
    acc = np.full(cm.num_classes, np.nan)
    np.divide(diag, gt_sum, out=acc, where=gt_present)

    miou = float(iou[present].mean()) if present.any() else None
    macc = float(acc[gt_present].mean()) if gt_present.any() else None
    return SemanticScores(iou, acc, miou, macc, present)


class PanopticStats:
    """Per-class TP/FP/FN segment counts and the summed IoUs of matches."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.iou_sum = np.zeros(num_classes, dtype=float)

    def merge(self, other: "PanopticStats") -> "PanopticStats":
        if other.num_classes != self.num_classes:
            raise InconsistentInputError("cannot merge stats of different class counts")
        out = PanopticStats(self.num_classes)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.fn = self.fn + other.fn
        out.iou_sum = self.iou_sum + other.iou_sum
        return out

    __add__ = merge


def panoptic_match(gt: PanopticLabels, pred: PanopticLabels, num_classes: int,
                   ignore_id: int) -> PanopticStats:
    """Match same-class segments between two panoptic labelings.

    Segments are (class, instance) groups; stuff points carry instance 0,
    so each stuff class forms one segment.  Points whose ground truth is
    ignored are excluded entirely; predictions labeled ignore form no
    segment.  Pairs with IoU strictly above 0.5 are TPs (this threshold
    makes the match unique); leftovers count as FP (prediction side) or FN
    (ground-truth side).
    """
    if len(gt) != len(pred):
        raise InconsistentInputError(f"gt has {len(gt)} points, pred has {len(pred)}")
    stats = PanopticStats(num_classes)
    valid = gt.semantic != ignore_id
    if not valid.any():
        return stats
    g_sem = gt.semantic[valid]
    g_inst = gt.instance[valid]
    p_sem = pred.semantic[valid]
    p_inst = pred.instance[valid]
    if (g_sem < 0).any() or (g_sem >= num_classes).any():
        raise InvalidLabelError("ground-truth id outside [0, Q)")
    p_real = p_sem != ignore_id
    if ((p_sem[p_real] < 0) | (p_sem[p_real] >= num_classes)).any():
        raise InvalidLabelError("prediction id outside [0, Q)")

    g_segs, g_inv = np.unique(np.stack([g_sem, g_inst], axis=1), axis=0, return_inverse=True)
    g_area = np.bincount(g_inv)

    if p_real.any():
        p_segs, p_inv_real = np.unique(
            np.stack([p_sem[p_real], p_inst[p_real]], axis=1), axis=0, return_inverse=True)
        p_area = np.bincount(p_inv_real)
        p_inv = np.full(g_inv.shape, -1, dtype=np.int64)
        p_inv[p_real] = p_inv_real
    else:
        p_segs = np.empty((0, 2), dtype=np.int64)
        p_area = np.empty(0, dtype=np.int64)
        p_inv = np.full(g_inv.shape, -1, dtype=np.int64)

    matched_gt = np.zeros(g_segs.shape[0], dtype=bool)
    matched_pred = np.zeros(p_segs.shape[0], dtype=bool)

    both = p_inv >= 0
    if both.any():
        pair_key = g_inv[both] * max(p_segs.shape[0], 1) + p_inv[both]
        pair_ids, inter = np.unique(pair_key, return_counts=True)
        g_of = pair_ids // max(p_segs.shape[0], 1)
        p_of = pair_ids % max(p_segs.shape[0], 1)
        same_class = g_segs[g_of, 0] == p_segs[p_of, 0]
        union = g_area[g_of] + p_area[p_of] - inter
        iou = inter / union
        hit = same_class & (iou > MATCH_IOU_THRESHOLD)
        for gi, pi, pair_iou in zip(g_of[hit], p_of[hit], iou[hit]):
            cls = g_segs[gi, 0]
            stats.tp[cls] += 1
            stats.iou_sum[cls] += pair_iou
            matched_gt[gi] = True
            matched_pred[pi] = True

    for gi in np.flatnonzero(~matched_gt):
        stats.fn[g_segs[gi, 0]] += 1
    for pi in np.flatnonzero(~matched_pred):
        stats.fp[p_segs[pi, 0]] += 1
    return stats


@dataclass
class PanopticScores:
    """PQ family as fractions; aggregate fields are None when no class applies."""

    pq: float | None
    sq: float | None
    rq: float | None
    pq_dagger: float | None
    pq_things: float | None
    sq_things: float | None
    rq_things: float | None
    pq_stuff: float | None
    sq_stuff: float | None
    rq_stuff: float | None
    per_class_pq: np.ndarray
    per_class_sq: np.ndarray
    per_class_rq: np.ndarray
    present: np.ndarray


def panoptic_scores(stats: PanopticStats, semantic_iou: np.ndarray,
                    thing_mask: np.ndarray) -> PanopticScores:
    """PQ / PQ-dagger / SQ / RQ with thing/stuff splits.

    Per class, ``SQ = sum(IoU)/TP`` (0 without TPs), ``RQ = TP / (TP +
    FP/2 + FN/2)`` and ``PQ = SQ * RQ``.  Aggregates average over classes
    present in ground truth or prediction.  PQ-dagger swaps each stuff
    class's PQ for its semantic IoU (``semantic_iou`` must cover those).
    """
    semantic_iou = np.asarray(semantic_iou, dtype=float)
    thing_mask = np.asarray(thing_mask, dtype=bool)
    q = stats.num_classes
    if semantic_iou.shape != (q,) or thing_mask.shape != (q,):
        raise InvalidInputError("semantic_iou and thing_mask must have length Q")

    tp = stats.tp.astype(float)
    sq = np.zeros(q)
    np.divide(stats.iou_sum, tp, out=sq, where=stats.tp > 0)
    rq_den = tp + 0.5 * stats.fp + 0.5 * stats.fn
    rq = np.zeros(q)
    np.divide(tp, rq_den, out=rq, where=rq_den > 0)
    pq = sq * rq

    present = (stats.tp + stats.fp + stats.fn) > 0
    dagger = np.where(thing_mask, pq, semantic_iou)

    def agg(values: np.ndarray, mask: np.ndarray) -> float | None:
        return float(values[mask].mean()) if mask.any() else None

    return PanopticScores(
        pq=agg(pq, present),
        sq=agg(sq, present),
        rq=agg(rq, present),
        pq_dagger=agg(dagger, present),
        pq_things=agg(pq, present & thing_mask),
        sq_things=agg(sq, present & thing_mask),
        rq_things=agg(rq, present & thing_mask),
        pq_stuff=agg(pq, present & ~thing_mask),
        sq_stuff=agg(sq, present & ~thing_mask),
        rq_stuff=agg(rq, present & ~thing_mask),
        per_class_pq=pq,
        per_class_sq=sq,
        per_class_rq=rq,
        present=present,
    )


@dataclass
class RobustnessTable:
    """Candidate and baseline mIoU per corruption and severity, plus clean mIoU."""

    corruptions: list[str]
    candidate: np.ndarray     # (K, L) in [0, 1]
    baseline: np.ndarray      # (K, L) in [0, 1)
    clean: float

    def __post_init__(self):
        self.candidate = np.asarray(self.candidate, dtype=float)
        self.baseline = np.asarray(self.baseline, dtype=float)
        k = len(self.corruptions)
        if self.candidate.shape != self.baseline.shape or self.candidate.shape[0] != k:
            raise InvalidInputError("candidate/baseline shape must be (num_corruptions, L)")
        for name, arr in (("candidate", self.candidate), ("baseline", self.baseline)):
            if ((arr < 0) | (arr > 1)).any():
                raise InvalidInputError(f"{name} accuracies must lie in [0, 1]")
        if (self.baseline >= 1.0).any():
            raise DegenerateBaselineError("baseline accuracies must be strictly below 1")
        if not 0 <= self.clean <= 1:
            raise InvalidInputError("clean accuracy must lie in [0, 1]")


@dataclass
class RobustnessScores:
    """Corruption error and resilience rate per corruption, in percent."""

    corruptions: list[str]
    ce: np.ndarray
    rr: np.ndarray
    mce: float
    mrr: float


def robustness_scores(table: RobustnessTable) -> RobustnessScores:
    """Corruption error against the baseline and retention against clean.

    ``CE_k = sum_l(1 - Acc_kl) / sum_l(1 - Acc^baseline_kl)`` and
    ``RR_k = sum_l Acc_kl / (L * Acc_clean)``; means run over the
    corruption types.  Reported in percent.
    """
    if table.clean == 0:
        raise DegenerateCleanError("clean accuracy is zero; resilience is undefined")
    base_den = (1.0 - table.baseline).sum(axis=1)
    if (base_den == 0).any():
        raise DegenerateBaselineError("a corruption has a zero baseline error sum")
    levels = table.candidate.shape[1]
    ce = (1.0 - table.candidate).sum(axis=1) / base_den * 100.0
    rr = table.candidate.sum(axis=1) / (levels * table.clean) * 100.0
    return RobustnessScores(
        corruptions=list(table.corruptions),
        ce=ce,
        rr=rr,
        mce=float(ce.mean()),
        mrr=float(rr.mean()),
    )
