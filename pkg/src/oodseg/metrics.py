"""Dense evaluation metrics: AP, FPR@95%TPR, AUROC, mIoU.

Binary metrics treat higher scores as more anomalous and group tied scores
into single threshold steps. The exact path sorts; the streaming path uses a
two-pass equal-width histogram, treating each bin as one tied group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import IGNORE_ID, OUTLIER_ID


class DegenerateEvalError(ValueError):
    pass


@dataclass
class MetricsReport:
    ap: float
    fpr_at_95: float
    auroc: float
    miou: float | None = None
    per_class_iou: dict[int, float] | None = None
    num_positives: int = 0
    num_negatives: int = 0
    approximate: bool = False
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "ap": self.ap,
            "fpr_at_95": self.fpr_at_95,
            "auroc": self.auroc,
            "num_positives": self.num_positives,
            "num_negatives": self.num_negatives,
            "approximate": self.approximate,
        }
        if self.miou is not None:
            d["miou"] = self.miou
        if self.per_class_iou is not None:
            d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        if self.notes:
            d["notes"] = self.notes
        return d


def _grouped_counts(scores: np.ndarray, labels: np.ndarray):
    """Per-threshold-group (tied score) positive/negative counts, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # group boundary where the descending score changes
    boundary = np.empty(len(s), dtype=bool)
    boundary[:-1] = s[:-1] != s[1:]
    boundary[-1] = True
    cum_pos = np.cumsum(y)
    cum_all = np.arange(1, len(s) + 1)
    tp = cum_pos[boundary].astype(np.int64)
    total = cum_all[boundary].astype(np.int64)
    pos = np.diff(np.concatenate(([0], tp)))
    neg = np.diff(np.concatenate(([0], total - tp)))
    return pos, neg


def _metrics_from_groups(pos: np.ndarray, neg: np.ndarray, target_tpr: float = 0.95):
    """AP, FPR@target, AUROC from per-group counts ordered by descending score."""
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0:
        raise DegenerateEvalError("no positive samples")
    if n_neg == 0:
        raise DegenerateEvalError("no negative samples")
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    ap = float(np.sum((recall - prev_recall) * precision))
    # first prefix whose TPR reaches the target; ties enter as whole groups
    idx = int(np.searchsorted(recall, target_tpr, side="left"))
    fpr_at = float(fp[idx] / n_neg)
    # rank statistic: a positive beats the negatives in strictly lower score
    # groups, and ties with the negatives in its own group counting half
    auroc = float(
        (np.sum(pos * (n_neg - fp).astype(np.float64)) + 0.5 * np.sum(pos * neg))
        / (n_pos * n_neg)
    )
    return ap, fpr_at, auroc, n_pos, n_neg


def _as_eval_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite values")
    return s, y


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve via step summation."""
    s, y = _as_eval_arrays(scores, labels)
    pos, neg = _grouped_counts(s, y)
    ap, _, _, _, _ = _metrics_from_groups(pos, neg)
    return ap


def fpr_at_tpr(scores, labels, target_tpr: float = 0.95) -> float:
    """FPR of the first descending-threshold prefix with TPR >= target."""
    s, y = _as_eval_arrays(scores, labels)
    pos, neg = _grouped_counts(s, y)
    _, fpr, _, _, _ = _metrics_from_groups(pos, neg, target_tpr)
    return fpr


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting half."""
    s, y = _as_eval_arrays(scores, labels)
    pos, neg = _grouped_counts(s, y)
    _, _, value, _, _ = _metrics_from_groups(pos, neg)
    return value


def binary_report(scores, labels) -> MetricsReport:
    """Exact AP / FPR@95 / AUROC over one evaluation set."""
    s, y = _as_eval_arrays(scores, labels)
    pos, neg = _grouped_counts(s, y)
    ap, fpr, roc, n_pos, n_neg = _metrics_from_groups(pos, neg)
    return MetricsReport(
        ap=ap, fpr_at_95=fpr, auroc=roc, num_positives=n_pos, num_negatives=n_neg
    )


def streaming_eval(scores, labels, bins: int = 4096) -> MetricsReport:
    """Approximate binary metrics from an equal-width score histogram.

    Two passes: min/max, then per-bin positive/negative counts. Each bin acts
    as one tied threshold group. Falls back to the exact single-group formulas
    when the score range is degenerate.
    """
    s, y = _as_eval_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateEvalError("need at least one positive and one negative")
    lo, hi = float(s.min()), float(s.max())
    if lo == hi:
        # single tied group: AP = prevalence, AUROC = 1/2, FPR@95 = 1
        return MetricsReport(
            ap=n_pos / len(y),
            fpr_at_95=1.0,
            auroc=0.5,
            num_positives=n_pos,
            num_negatives=n_neg,
            approximate=True,
            notes={"degenerate_range": True},
        )
    idx = np.minimum(((s - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    pos_hist = np.bincount(idx[y == 1], minlength=bins)
    neg_hist = np.bincount(idx[y == 0], minlength=bins)
    # descending score = descending bin index
    pos_groups = pos_hist[::-1]
    neg_groups = neg_hist[::-1]
    keep = (pos_groups + neg_groups) > 0
    ap, fpr, roc, _, _ = _metrics_from_groups(pos_groups[keep], neg_groups[keep])
    return MetricsReport(
        ap=ap,
        fpr_at_95=fpr,
        auroc=roc,
        num_positives=n_pos,
        num_negatives=n_neg,
        approximate=True,
    )


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """K x K counts over pixels with inlier ground truth; rows = gt class."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} dims differ")
    valid = (gt != OUTLIER_ID) & (gt != IGNORE_ID)
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size == 0:
        raise DegenerateEvalError("no evaluable pixels")
    if g.max(initial=0) >= num_classes or p.max(initial=0) >= num_classes:
        raise ValueError("class id out of range for confusion matrix")
    return np.bincount(
        g * num_classes + p, minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    """Mean IoU over inlier classes (OUTLIER/IGNORE pixels excluded).

    Classes absent from both prediction and ground truth are skipped.
    Returns (miou, {class_id: iou}).
    """
    cm = confusion_matrix(pred, gt, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = {}
    for c in range(num_classes):
        if denom[c] > 0:
            per_class[c] = float(tp[c] / denom[c])
    if not per_class:
        raise DegenerateEvalError("no evaluable pixels")
    return float(np.mean(list(per_class.values()))), per_class
