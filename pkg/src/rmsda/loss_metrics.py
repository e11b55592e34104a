"""Training losses and evaluation metrics.

The losses are composed from taped primitives, so their gradients come
from the same reverse-mode machinery as the network itself. Metrics are
plain NumPy on thresholded predictions and are never differentiated.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .engine import ops
from .engine.tensor import Tensor
from .errors import ShapeError


def dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Smoothed soft dice loss, 1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s).

    pred holds probabilities in (0, 1); target holds {0, 1}. Exact
    agreement on a non-empty mask drives the loss to 0; the smoothing
    term keeps it finite and defined on empty masks.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"dice_loss: shapes {pred.shape} vs {target.shape}")
    inter = ops.sum_all(ops.mul(pred, target))
    total = ops.add(ops.sum_all(pred), ops.sum_all(target))
    num = ops.affine(inter, 2.0, smooth)
    den = ops.affine(total, 1.0, smooth)
    return ops.affine(ops.div(num, den), -1.0, 1.0)


def focal_loss(pred: Tensor, target: Tensor, gamma: float = 2.0,
               eps: float = 1e-7) -> Tensor:
    """Mean focal cross-entropy with focusing exponent gamma.

    Per element: -(y * (1-p)^gamma * log p + (1-y) * p^gamma * log(1-p)),
    with p clamped to [eps, 1 - eps] before the logs.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"focal_loss: shapes {pred.shape} vs {target.shape}")
    p = ops.clamp(pred, eps, 1.0 - eps)
    q = ops.affine(p, -1.0, 1.0)
    pos = ops.mul(target, ops.mul(ops.pow_const(q, gamma), ops.log(p)))
    neg = ops.mul(ops.affine(target, -1.0, 1.0),
                  ops.mul(ops.pow_const(p, gamma), ops.log(q)))
    return ops.affine(ops.mean_all(ops.add(pos, neg)), -1.0, 0.0)


def combined_loss(pred: Tensor, target: Tensor, smooth: float = 1.0,
                  gamma: float = 2.0, eps: float = 1e-7) -> Tensor:
    """Sum of the dice and focal losses."""
    return ops.add(dice_loss(pred, target, smooth),
                   focal_loss(pred, target, gamma, eps))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts and the five derived scores.

    degenerate lists the metrics whose denominator was zero; those are
    reported as 1.0 (an absent class predicted absent counts as perfect).
    """

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    specificity: float
    recall: float
    dice: float
    jaccard: float
    degenerate: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d


def confusion_counts(pred, target, threshold: float = 0.5) -> tuple:
    """(tp, fp, tn, fn) after thresholding: probability >= threshold is 1."""
    p = np.asarray(getattr(pred, "data", pred))
    t = np.asarray(getattr(target, "data", target))
    if p.shape != t.shape:
        raise ShapeError(f"confusion_counts: shapes {p.shape} vs {t.shape}")
    pos = p >= threshold
    truth = t >= 0.5
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    tn = int(np.count_nonzero(~pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    return tp, fp, tn, fn


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> MetricsReport:
    """Derive the five scores from confusion counts."""
    flags = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            flags.append(name)
            return 1.0
        return num / den

    return MetricsReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=ratio(tp + tn, tp + fp + tn + fn, "accuracy"),
        specificity=ratio(tn, tn + fp, "specificity"),
        recall=ratio(tp, tp + fn, "recall"),
        dice=ratio(2 * tp, 2 * tp + fp + fn, "dice"),
        jaccard=ratio(tp, tp + fp + fn, "jaccard"),
        degenerate=tuple(flags),
    )


def segmentation_metrics(pred, target, threshold: float = 0.5) -> MetricsReport:
    """Accuracy, specificity, recall, dice and jaccard from thresholded masks."""
    return metrics_from_counts(*confusion_counts(pred, target, threshold))
