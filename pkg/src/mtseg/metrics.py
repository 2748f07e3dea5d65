"""Binary segmentation metrics, reported as percentages.

Confusion-matrix ratios use the vacuous convention 100 whenever a
denominator is zero (no opportunity for that error type), so a slice
where prediction and ground truth are both empty scores 100 everywhere.
The Hausdorff distance is the classical symmetric max-min form in pixel
units; if either mask is empty it degenerates to the image diagonal and
the slice is flagged.
"""

import math
from dataclasses import dataclass

import numpy as np


def threshold_predictions(probs, tau):
    """Binarize probabilities: foreground where p > tau, tau in (0, 1)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold tau must be in (0, 1), got {tau}")
    probs = np.asarray(probs)
    return (probs > tau).astype(np.float32)


def _ratio(num, den):
    return 100.0 if den == 0 else 100.0 * num / den


@dataclass
class SliceMetrics:
    dice: float
    miou: float
    recall: float
    precision: float
    specificity: float
    hausdorff: float
    hausdorff_degenerate: bool = False


@dataclass
class MetricsRecord:
    """Unweighted per-slice means over an evaluation set."""
    dice: float
    miou: float
    recall: float
    precision: float
    specificity: float
    hausdorff: float
    n_slices: int
    n_hausdorff_degenerate: int

    FIELDS = ("dice", "miou", "recall", "precision", "specificity", "hausdorff")


def confusion_metrics(pred, gt):
    """Dice, mIoU, recall, precision and specificity for one binary pair."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion_metrics: shapes {pred.shape} vs {gt.shape}")
    p = pred != 0
    g = gt != 0
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    dice = _ratio(2 * tp, 2 * tp + fp + fn)
    iou_fg = _ratio(tp, tp + fp + fn)
    iou_bg = _ratio(tn, tn + fp + fn)
    return {
        "dice": dice,
        "miou": (iou_fg + iou_bg) / 2.0,
        "recall": _ratio(tp, tp + fn),
        "precision": _ratio(tp, tp + fp),
        "specificity": _ratio(tn, tn + fp),
    }


def hausdorff(pred, gt):
    """Symmetric Hausdorff distance between foreground point sets, in
    pixels.  Returns (distance, degenerate); degenerate marks slices
    where either mask is empty and the image diagonal is substituted."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"hausdorff: shapes {pred.shape} vs {gt.shape}")
    a = np.argwhere(pred != 0).astype(np.float64)
    b = np.argwhere(gt != 0).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        h, w = pred.shape[-2], pred.shape[-1]
        return math.hypot(h, w), True
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    forward = d2.min(axis=1).max()
    backward = d2.min(axis=0).max()
    return float(math.sqrt(max(forward, backward))), False


def slice_metrics(pred, gt):
    conf = confusion_metrics(pred, gt)
    hd, degenerate = hausdorff(np.asarray(pred).reshape(pred.shape[-2:]),
                               np.asarray(gt).reshape(gt.shape[-2:]))
    return SliceMetrics(hausdorff=hd, hausdorff_degenerate=degenerate, **conf)


def evaluate_batch(probs, masks, tau):
    """Per-slice metrics for probability maps [N,1,H,W] against binary
    masks of the same shape."""
    probs = np.asarray(probs)
    masks = np.asarray(masks)
    if probs.shape != masks.shape:
        raise ValueError(f"evaluate_batch: shapes {probs.shape} vs {masks.shape}")
    pred = threshold_predictions(probs, tau)
    return [slice_metrics(pred[i, 0], masks[i, 0]) for i in range(probs.shape[0])]


def aggregate(records):
    """Unweighted mean of per-slice metrics."""
    if not records:
        raise ValueError("aggregate: no slice records")
    means = {f: sum(getattr(r, f) for r in records) / len(records)
             for f in MetricsRecord.FIELDS}
    return MetricsRecord(n_slices=len(records),
                         n_hausdorff_degenerate=sum(r.hausdorff_degenerate for r in records),
                         **means)
