"""Confusion-matrix evaluation: mIoU and pixel accuracy."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .errors import ShapeError

IGNORE_INDEX = 255


class ConfusionMatrix:
    """K x K counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes, ignore_index=IGNORE_INDEX, counts=None):
        if num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    def accumulate(self, pred, truth):
        """Return a new matrix with the pixels of ``pred``/``truth`` added."""
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction shape {pred.shape} != label shape {truth.shape}",
                             pred_shape=list(pred.shape), label_shape=list(truth.shape))
        keep = truth != self.ignore_index
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        bad = (t < 0) | (t >= k) | (p < 0) | (p >= k)
        if bad.any():
            vals = sorted(set(np.concatenate([t[bad], p[bad]]).tolist()))
            raise ValueError(f"class ids {vals[:10]} out of range [0, {k})")
        counts = self.counts + np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return ConfusionMatrix(k, self.ignore_index, counts)

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self):
        """Per-class IoU; NaN where a class has an empty union."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - np.diag(self.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def to_dict(self):
        return {"num_classes": self.num_classes, "miou": miou(self), "pixel_accuracy": pixel_accuracy(self),
                "iou": [None if np.isnan(v) else float(v) for v in self.iou()], "counts": self.counts.tolist()}


def accumulate(cm, pred, truth):
    return cm.accumulate(pred, truth)


def miou(cm, empty="exclude"):
    """Mean IoU. Classes with zero union are left out (``empty='exclude'``) or count as 0 (``'zero'``)."""
    if cm.num_classes < 2:
        raise ValueError("mIoU needs at least two classes")
    if empty not in ("exclude", "zero"):
        raise ValueError(f"empty must be 'exclude' or 'zero', got {empty!r}")
    # rational arithmetic on the integer counts, rounded once at the end
    tp = np.diag(cm.counts)
    union = cm.counts.sum(0) + cm.counts.sum(1) - tp
    ious = [Fraction(int(t), int(u)) if u else None for t, u in zip(tp, union)]
    if empty == "zero":
        ious = [Fraction(0) if v is None else v for v in ious]
    present = [v for v in ious if v is not None]
    if not present:
        raise ValueError("mIoU undefined: every class has an empty union")
    return float(sum(present) / len(present))


def pixel_accuracy(cm):
    total = cm.total
    if total == 0:
        raise ValueError("pixel accuracy undefined for an empty confusion matrix")
    return float(Fraction(int(np.trace(cm.counts)), total))
