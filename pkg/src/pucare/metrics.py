"""Pixel-level segmentation metrics: accuracy, IoU and Dice.

IoU and Dice are computed from the foreground confusion counts of a single
image. When both masks are empty the ratios are 0/0; that case scores 1.0
(no wound present, none predicted).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, ParameterError


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricTriple:
    acc: float
    iou: float
    dsc: float

    def to_dict(self) -> dict:
        return asdict(self)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``prob >= threshold`` as a uint8 mask; ties go to foreground."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _as_binary(mask, what: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{what} mask is not binary")
    return arr.astype(bool)


def confusion_counts(pred, truth) -> Confusion:
    p = _as_binary(pred, "predicted")
    t = _as_binary(truth, "ground-truth")
    if p.shape != t.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Confusion(tp=tp, tn=p.size - tp - fp - fn, fp=fp, fn=fn)


def accuracy(c: Confusion) -> float:
    if c.total <= 0:
        raise ParameterError("accuracy of an empty confusion table is undefined")
    return (c.tp + c.tn) / c.total


def iou_from_counts(c: Confusion) -> float:
    union = c.tp + c.fp + c.fn
    return 1.0 if union == 0 else c.tp / union


def dsc_from_counts(c: Confusion) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou(pred, truth) -> float:
    return iou_from_counts(confusion_counts(pred, truth))


def dsc(pred, truth) -> float:
    return dsc_from_counts(confusion_counts(pred, truth))


def metric_triple(c: Confusion) -> MetricTriple:
    return MetricTriple(acc=accuracy(c), iou=iou_from_counts(c), dsc=dsc_from_counts(c))


def evaluate_pair(pred, truth) -> MetricTriple:
    return metric_triple(confusion_counts(pred, truth))


def macro_average(triples: list[MetricTriple]) -> MetricTriple:
    """Mean over images of each per-image metric."""
    if not triples:
        raise ParameterError("cannot average an empty list of metrics")
    n = len(triples)
    return MetricTriple(
        acc=float(np.sum([t.acc for t in triples]) / n),
        iou=float(np.sum([t.iou for t in triples]) / n),
        dsc=float(np.sum([t.dsc for t in triples]) / n),
    )


def micro_average(confusions: list[Confusion]) -> MetricTriple:
    """Metrics of the pixel counts pooled over all images."""
    if not confusions:
        raise ParameterError("cannot pool an empty list of confusion tables")
    pooled = confusions[0]
    for c in confusions[1:]:
        pooled = pooled + c
    return metric_triple(pooled)
