"""Segmentation metrics: confusion counts, derived rates, ROC and AUC.

A pixel counts as predicted-positive when its probability is greater than
or equal to the threshold.  Rates with a zero denominator return 0.0 with
a warning rather than raising, so a batch evaluation never dies on a
degenerate image; the empty-union Jaccard case returns 1.0 (two empty
masks agree perfectly).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(probs: np.ndarray, gt: np.ndarray,
              threshold: float = 0.5) -> ConfusionCounts:
    """Count pixels; ``gt`` must already be binary (0/1 or bool)."""
    probs = np.asarray(probs)
    gt = np.asarray(gt)
    if probs.shape != gt.shape:
        raise ShapeError(f"confusion: probabilities {probs.shape} and "
                         f"ground truth {gt.shape} differ")
    pos = probs >= threshold
    truth = gt.astype(bool)
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    tn = int(np.count_nonzero(~pos & ~truth))
    return ConfusionCounts(tp, fp, tn, fn)


def _rate(num: int, denom: int, name: str) -> float:
    if denom == 0:
        warnings.warn(f"{name}: zero denominator, returning 0.0")
        return 0.0
    return num / denom


def accuracy(c: ConfusionCounts) -> float:
    return _rate(c.tp + c.tn, c.total, "accuracy")


def ppv(c: ConfusionCounts) -> float:
    """Positive predictive value (precision): TP / (TP + FP)."""
    return _rate(c.tp, c.tp + c.fp, "ppv")


def tpr(c: ConfusionCounts) -> float:
    """True positive rate (sensitivity): TP / (TP + FN)."""
    return _rate(c.tp, c.tp + c.fn, "tpr")


def tnr(c: ConfusionCounts) -> float:
    """True negative rate (specificity): TN / (TN + FP)."""
    return _rate(c.tn, c.tn + c.fp, "tnr")


def f1_score(ppv_value: float, tpr_value: float) -> float:
    """Harmonic mean of precision and sensitivity."""
    if ppv_value + tpr_value == 0.0:
        warnings.warn("f1_score: precision and sensitivity are both zero, "
                      "returning 0.0")
        return 0.0
    return 2.0 * ppv_value * tpr_value / (ppv_value + tpr_value)


def jaccard(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks."""
    pred_mask = np.asarray(pred_mask).astype(bool)
    gt_mask = np.asarray(gt_mask).astype(bool)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"jaccard: masks {pred_mask.shape} and "
                         f"{gt_mask.shape} differ")
    union = int(np.count_nonzero(pred_mask | gt_mask))
    if union == 0:
        warnings.warn("jaccard: both masks empty, returning 1.0")
        return 1.0
    inter = int(np.count_nonzero(pred_mask & gt_mask))
    return inter / union


def jaccard_from_counts(c: ConfusionCounts) -> float:
    union = c.tp + c.fp + c.fn
    if union == 0:
        warnings.warn("jaccard: both masks empty, returning 1.0")
        return 1.0
    return c.tp / union


@dataclass
class RocCurve:
    """Operating points ordered by descending threshold.

    The first point is the ``+inf`` threshold (nothing predicted positive,
    FPR = TPR = 0); the last threshold is the smallest score, where
    everything is positive and FPR = TPR = 1.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


def roc_auc(scores: np.ndarray, labels: np.ndarray) \
        -> tuple[RocCurve, float]:
    """ROC curve over distinct score thresholds plus trapezoidal AUC.

    Ties share one operating point.  Both classes must be present,
    otherwise the rates are undefined.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"roc_auc: {scores.shape} scores vs "
                         f"{labels.shape} labels")
    n_pos = int(np.count_nonzero(labels))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc: need both classes, got "
                        f"{n_pos} positive and {n_neg} negative samples")

    distinct = np.unique(scores)  # ascending
    idx = np.searchsorted(distinct, scores)
    pos_at = np.bincount(idx[labels], minlength=distinct.size)
    neg_at = np.bincount(idx[~labels], minlength=distinct.size)
    # Walk thresholds from high to low; each distinct score adds its tied
    # samples in one step.
    tp = np.cumsum(pos_at[::-1])
    fp = np.cumsum(neg_at[::-1])
    thresholds = np.concatenate([[np.inf], distinct[::-1]])
    tpr_curve = np.concatenate([[0.0], tp / n_pos])
    fpr_curve = np.concatenate([[0.0], fp / n_neg])
    auc = float(np.trapezoid(tpr_curve, fpr_curve))
    return RocCurve(thresholds, fpr_curve, tpr_curve), auc


def metrics_row(c: ConfusionCounts, auc: float | None = None) -> dict:
    """One report row of every derived metric."""
    p = ppv(c)
    r = tpr(c)
    row = {
        "ppv": p,
        "tpr": r,
        "tnr": tnr(c),
        "acc": accuracy(c),
        "f1": f1_score(p, r),
        "jaccard": jaccard_from_counts(c),
    }
    if auc is not None:
        row["auc"] = auc
    return row


def write_report_csv(path, rows: list[dict]) -> None:
    """Rows share their keys; the first row fixes the column order."""
    if not rows:
        raise DataError("write_report_csv: no rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(t)), repr(float(x)),
                             repr(float(y))])


def write_roc_svg(path, curve: RocCurve, size: int = 480) -> None:
    """Self-contained SVG of the ROC curve with the chance diagonal."""
    margin = 40
    span = size - 2 * margin

    def sx(v: float) -> float:
        return margin + v * span

    def sy(v: float) -> float:
        return size - margin - v * span

    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}"
                   for x, y in zip(curve.fpr, curve.tpr))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(1):.2f}" '
        f'y2="{sy(1):.2f}" stroke="#bbbbbb" stroke-dasharray="6,4"/>',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" '
        f'fill="none" stroke="black"/>',
        f'<polyline points="{pts}" fill="none" stroke="#d62728" '
        f'stroke-width="1.5"/>',
        f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" '
        f'font-size="13">false positive rate</text>',
        f'<text x="12" y="{size / 2:.0f}" text-anchor="middle" '
        f'font-size="13" transform="rotate(-90 12 {size / 2:.0f})">'
        f'true positive rate</text>',
        "</svg>",
    ]
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
