"""
Pixel confusion counts and the three headline ratios. PV is the positive
class; metrics whose denominator is zero (both masks empty) count as 1.0.
"""

from dataclasses import dataclass

import numpy as np

from pvseg.data.patches import MaskPatch
from pvseg.errors import ShapeMismatchError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative, got {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp,
            self.tn + other.tn,
            self.fp + other.fp,
            self.fn + other.fn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionCounts":
        """Counts with prediction and ground truth exchanged."""
        return ConfusionCounts(self.tp, self.tn, self.fn, self.fp)

    def as_dict(self) -> dict[str, int]:
        return {"TP": self.tp, "TN": self.tn, "FP": self.fp, "FN": self.fn}


def _binary(mask: MaskPatch | np.ndarray) -> np.ndarray:
    data = mask.data if isinstance(mask, MaskPatch) else np.asarray(mask)
    return data.astype(bool)


def confusion(pred: MaskPatch | np.ndarray, gt: MaskPatch | np.ndarray) -> ConfusionCounts:
    pred, gt = _binary(pred), _binary(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.shape} does not match ground truth {gt.shape}"
        )
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp=tp, tn=pred.size - tp - fp - fn, fp=fp, fn=fn)


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn + c.fp
    return 1.0 if denom == 0 else c.tp / denom


def f1(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fn + c.fp
    return 1.0 if denom == 0 else 2 * c.tp / denom


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy is undefined for zero evaluated pixels")
    return (c.tp + c.tn) / c.total
