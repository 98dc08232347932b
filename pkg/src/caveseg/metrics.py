"""Confusion-matrix metrics: per-class IoU and accuracy, mIoU, mAcc, aAcc."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError

IGNORE_INDEX = 255


@dataclass
class ConfusionMatrix:
    """``counts[g, p]`` = number of scored pixels with ground truth g predicted as p."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, gt, pred, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        self.counts += confusion_counts(gt, pred, self.num_classes, ignore_index)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError(f"cannot merge {self.counts.shape} with {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)

    def iou_per_class(self) -> np.ndarray:
        return iou_per_class(self)

    def accuracy_per_class(self) -> np.ndarray:
        return accuracy_per_class(self)

    def summarize(self) -> dict:
        return summarize(self)


def confusion_counts(gt, pred, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
    scored = gt != ignore_index
    g = gt[scored].astype(np.int64)
    p = pred[scored].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise DataError(f"ground-truth labels outside 0..{num_classes - 1}")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise DataError(f"predicted labels outside 0..{num_classes - 1}")
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def accumulate(cm: ConfusionMatrix, gt, pred, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    return cm.accumulate(gt, pred, ignore_index)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both gt and prediction."""
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - inter
    out = np.full(cm.num_classes, np.nan)
    defined = union > 0
    out[defined] = inter[defined] / union[defined]
    return out


def accuracy_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """Recall per class; NaN where the class has no ground-truth pixels."""
    c = cm.counts.astype(np.float64)
    rows = c.sum(axis=1)
    out = np.full(cm.num_classes, np.nan)
    present = rows > 0
    out[present] = np.diag(c)[present] / rows[present]
    return out


def _exact_mean(num: np.ndarray, den: np.ndarray) -> float:
    """Mean of ``num/den`` over ``den > 0``, rounded once from the exact rational."""
    keep = den > 0
    terms = [Fraction(int(n), int(d)) for n, d in zip(num[keep], den[keep])]
    return float(sum(terms, Fraction(0)) / len(terms))


def summarize(cm: ConfusionMatrix) -> dict:
    """mIoU, mAcc and aAcc as fractions; undefined classes are left out of the means.

    Counts are integers, so each value is the correctly rounded float of the
    exact rational result.
    """
    total = cm.total
    if total == 0:
        raise DataError("no scored pixels; metrics are undefined")
    c = cm.counts.astype(np.int64)
    inter = np.diag(c)
    rows = c.sum(axis=1)
    union = rows + c.sum(axis=0) - inter
    return {
        "mIoU": _exact_mean(inter, union),
        "mAcc": _exact_mean(inter, rows),
        "aAcc": float(Fraction(int(inter.sum()), total)),
    }


def format_table(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> str:
    """Plain-text table of per-class IoU/Acc (percent) with a summary row."""
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.num_classes)]
    iou, acc = iou_per_class(cm), accuracy_per_class(cm)
    width = max(12, max(len(n) for n in names) + 2)

    def pct(v):
        return "     -" if np.isnan(v) else f"{100 * v:6.2f}"

    lines = [f"{'class':<{width}}{'IoU':>8}{'Acc':>8}", "-" * (width + 16)]
    for name, i, a in zip(names, iou, acc):
        lines.append(f"{name:<{width}}  {pct(i)}  {pct(a)}")
    lines.append("-" * (width + 16))
    s = summarize(cm)
    lines.append(f"{'summary':<{width}}  mIoU {100 * s['mIoU']:.2f}  mAcc {100 * s['mAcc']:.2f}  aAcc {100 * s['aAcc']:.2f}")
    return "\n".join(lines) + "\n"


def format_key_values(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> str:
    """Machine-readable ``key<TAB>value`` lines (fractions, ``nan`` for undefined)."""
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.num_classes)]
    s = summarize(cm)
    lines = [f"{k}\t{v:.12g}" for k, v in s.items()]
    lines.append(f"pixels\t{cm.total}")
    for name, i, a in zip(names, iou_per_class(cm), accuracy_per_class(cm)):
        lines.append(f"iou.{name}\t{i:.12g}")
        lines.append(f"acc.{name}\t{a:.12g}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split("\t")
            out[k] = float(v)
    return out
