"""Segmentation evaluation statistics: Dice, pixel accuracy, IoU, PSNR,
confusion rates, ROC/AUC, and binary cross-entropy.

Predictions come in two flavors: binary masks (uint8 {0, 1}) and probability
maps (float arrays in [0, 1]).  All functions are pure and stateless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "ConfusionCounts",
    "ConfusionMetrics",
    "RocCurve",
    "dice",
    "confusion_metrics",
    "psnr",
    "roc_auc",
    "bce",
    "threshold_probabilities",
    "frame_report",
    "jsonable_report",
]

BCE_EPS = 1e-7


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


class ConfusionMetrics(NamedTuple):
    counts: ConfusionCounts
    accuracy: float
    iou: float
    precision: float
    recall: float


@dataclass(frozen=True)
class RocCurve:
    """(FPR, TPR) points ordered by threshold descending, (0,0)-anchored,
    ending at (1,1); ``auc`` by the trapezoidal rule."""

    points: tuple
    auc: float


def _check_same_shape(a, b, what="masks"):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what} dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap score 2|P n G| / (|P| + |G|); 1.0 when both masks are empty."""
    pred, gt = _check_same_shape(pred, gt)
    p = pred != 0
    g = gt != 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def confusion_metrics(pred: np.ndarray, gt: np.ndarray) -> ConfusionMetrics:
    """Pixel confusion counts plus accuracy, IoU, precision, recall.
    Ratios with an empty denominator are defined as 1.0 (vacuously correct)."""
    pred, gt = _check_same_shape(pred, gt)
    p = pred != 0
    g = gt != 0
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    tn = int((~p & ~g).sum())
    total = tp + fp + tn + fn

    def ratio(num, den):
        return num / den if den else 1.0

    counts = ConfusionCounts(tp, fp, tn, fn)
    return ConfusionMetrics(
        counts,
        accuracy=ratio(tp + tn, total),
        iou=ratio(tp, tp + fp + fn),
        precision=ratio(tp, tp + fp),
        recall=ratio(tp, tp + fn),
    )


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB between a probability map and the
    {0, 1} ground truth, peak 1.0.  Zero MSE yields +inf."""
    pred, gt = _check_same_shape(pred, gt, "probability map / mask")
    diff = np.asarray(pred, dtype=np.float64) - (np.asarray(gt) != 0)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def bce(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped to
    [1e-7, 1 - 1e-7] so logs stay finite."""
    pred, gt = _check_same_shape(pred, gt, "probability map / mask")
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = (np.asarray(gt) != 0).astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def roc_auc(pred: np.ndarray, gt: np.ndarray) -> RocCurve:
    """ROC curve from a threshold sweep over every distinct score.

    Tied scores move between classes together, so the trapezoidal AUC
    equals the pairwise rank statistic (ties counted 1/2) exactly.
    Raises on single-class ground truth.
    """
    pred, gt = _check_same_shape(pred, gt, "probability map / mask")
    scores = np.asarray(pred, dtype=np.float64).ravel()
    y = (np.asarray(gt) != 0).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate ROC: ground truth contains a single class")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    labels = y[order]
    # last index of each tied group of scores
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    auc = float(np.sum(np.diff(fpr) * (tpr[:-1] + tpr[1:]) / 2.0))
    return RocCurve(tuple(zip(fpr.tolist(), tpr.tolist())), auc)


def threshold_probabilities(prob: np.ndarray) -> np.ndarray:
    """Binary mask: pixel = 1 iff probability >= 0.5 (inclusive)."""
    return (np.asarray(prob) >= 0.5).astype(np.uint8)


def frame_report(prob: np.ndarray, gt: np.ndarray) -> dict:
    """All statistics for one (probability map, ground truth) pair as the
    machine-readable report dict.  ``auc`` is None for single-class frames."""
    mask = threshold_probabilities(prob)
    cm = confusion_metrics(mask, gt)
    try:
        auc = roc_auc(prob, gt).auc
    except ValueError:
        auc = None
    return {
        "dice": dice(mask, gt),
        "accuracy": cm.accuracy,
        "iou": cm.iou,
        "precision": cm.precision,
        "recall": cm.recall,
        "psnr": psnr(prob, gt),
        "auc": auc,
        "bce": bce(prob, gt),
        "tp": cm.counts.tp,
        "fp": cm.counts.fp,
        "tn": cm.counts.tn,
        "fn": cm.counts.fn,
    }


def jsonable_report(report: dict) -> dict:
    """Replace non-finite floats with the 'inf' sentinel strings JSON can hold."""
    out = {}
    for k, v in report.items():
        if isinstance(v, float) and math.isinf(v):
            out[k] = "inf" if v > 0 else "-inf"
        else:
            out[k] = v
    return out
