"""Confusion counts and the diagnostic metrics derived from them."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import EmptyInputError, UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        return asdict(self)


def _as_bool(v):
    if isinstance(v, str):
        v = v.lower()
        if v in ("pos", "positive", "1", "true"):
            return True
        if v in ("neg", "negative", "0", "false"):
            return False
        raise ValueError(f"cannot read {v!r} as a class label")
    return bool(v)


def confusion(pairs: Iterable) -> ConfusionCounts:
    """Tally ``(predicted, truth)`` pairs; labels may be bools, 0/1 or 'pos'/'neg'."""
    tp = fp = tn = fn = 0
    n = 0
    for pred, truth in pairs:
        p, t = _as_bool(pred), _as_bool(truth)
        n += 1
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    if n == 0:
        raise EmptyInputError("confusion needs at least one prediction")
    return ConfusionCounts(tp, fp, tn, fn)


def confusion_from_scores(scores, truths, threshold=0.5):
    scores = np.asarray(scores)
    return confusion(zip(scores >= threshold, np.asarray(truths).astype(bool)))


def sensitivity(c: ConfusionCounts) -> float:
    """TP / (TP + FN)."""
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity is undefined without positive cases")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    """TN / (TN + FP)."""
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity is undefined without negative cases")
    return c.tn / (c.tn + c.fp)


def accuracy(c: ConfusionCounts) -> float:
    """(TN + TP) / (TN + TP + FN + FP)."""
    if c.total == 0:
        raise UndefinedMetricError("accuracy is undefined for zero cases")
    return (c.tn + c.tp) / c.total


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: Optional[float]
    specificity: Optional[float]
    accuracy: Optional[float]
    counts: ConfusionCounts
    threshold: float

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, threshold=0.5):
        """Undefined metrics become ``None``; use :attr:`undefined` to check."""
        vals = []
        for fn in (sensitivity, specificity, accuracy):
            try:
                vals.append(fn(counts))
            except UndefinedMetricError:
                vals.append(None)
        return cls(*vals, counts, threshold)

    @property
    def undefined(self):
        return [k for k in ("sensitivity", "specificity", "accuracy") if getattr(self, k) is None]

    def to_dict(self):
        return {"sensitivity": self.sensitivity, "specificity": self.specificity,
                "accuracy": self.accuracy, "counts": self.counts.to_dict(),
                "threshold": self.threshold}


@dataclass(frozen=True)
class ComparisonRow:
    model: str
    sensitivity: float   # percent
    specificity: float
    accuracy: float

    def __post_init__(self):
        for k in ("sensitivity", "specificity", "accuracy"):
            v = getattr(self, k)
            if not 0 <= v <= 100:
                raise ValueError(f"{self.model}: {k} {v} is not a percentage")

    @classmethod
    def from_report(cls, name, report: MetricsReport):
        return cls(name, 100 * report.sensitivity, 100 * report.specificity, 100 * report.accuracy)
