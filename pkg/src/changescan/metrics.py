"""Pixel-count confusion statistics and the standard agreement metrics.

Change is the positive class.  Every metric with a zero denominator is
reported as 0.0 and the metric's name is listed in `degenerate`, so
tables stay total while the caller can still tell "truly zero" from
"undefined".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def confusion(pred, truth) -> ConfusionCounts:
    """Exact pixel counts; inputs are any arrays of {0,1}-like values."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} vs truth {t.shape}")
    p = p.astype(bool)
    t = t.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


@dataclass
class MetricResult:
    oa: float
    precision: float
    recall: float
    f1: float
    iou: float
    kc: float
    degenerate: tuple = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {"oa": self.oa, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "iou": self.iou,
                "kc": self.kc}


def _ratio(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> MetricResult:
    """Overall accuracy, precision, recall, F1, IoU, and Cohen's kappa."""
    flags: list = []
    n = c.total
    oa = _ratio(c.tp + c.tn, n, "oa", flags)
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    f1 = _ratio(2.0 * precision * recall, precision + recall, "f1", flags)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, "iou", flags)
    if n == 0:
        flags.append("kc")
        kc = 0.0
    else:
        p_expected = ((c.tp + c.fp) * (c.tp + c.fn)
                      + (c.fn + c.tn) * (c.fp + c.tn)) / (n * n)
        kc = _ratio(oa - p_expected, 1.0 - p_expected, "kc", flags)
    return MetricResult(oa=oa, precision=precision, recall=recall, f1=f1,
                        iou=iou, kc=kc, degenerate=tuple(flags))
