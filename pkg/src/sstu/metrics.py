"""Segmentation quality metrics: IoU, pixel accuracy, precision, recall.

Person pixels (value 1) are the positive class.  Degenerate denominators
follow the vacuously-perfect convention so dataset means stay defined:
precision = 1 if tp+fp = 0, recall = 1 if tp+fn = 0, iou = 1 if
tp+fp+fn = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def binarize(p, threshold=0.5):
    """prob >= threshold -> 1. The boundary value counts as positive."""
    return (np.asarray(p) >= threshold).astype(np.uint8)


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp, fp, fn, tn)


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else 1.0


def pa(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 1.0


def recall(c: ConfusionCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 1.0


def stereo_consistency(left, right) -> float:
    """IoU between the two eyes' masks; 1.0 = identical, no disparity
    compensation is attempted."""
    return iou(confusion(left, right))


@dataclass(frozen=True)
class ImageMetrics:
    id: str
    iou: float
    pa: float
    precision: float
    recall: float


@dataclass
class EvalReport:
    per_image: list[ImageMetrics]
    miou: float
    mpa: float
    mprecision: float
    mrecall: float
    # dataset-level metrics from summed pixel counts (micro average)
    aggregate: ConfusionCounts
    timing: dict | None = None

    @property
    def aggregate_miou(self):
        return iou(self.aggregate)

    def to_csv(self) -> str:
        lines = ["id,iou,pa,precision,recall"]
        for m in self.per_image:
            lines.append(f"{m.id},{m.iou:.4f},{m.pa:.4f},{m.precision:.4f},{m.recall:.4f}")
        lines.append(f"MEAN,{self.miou:.4f},{self.mpa:.4f},"
                     f"{self.mprecision:.4f},{self.mrecall:.4f}")
        return "\n".join(lines) + "\n"


def evaluate_masks(pairs) -> EvalReport:
    """pairs: iterable of (id, predicted BinaryMask, ground-truth BinaryMask)."""
    per_image = []
    agg = ConfusionCounts(0, 0, 0, 0)
    for pid, pred, gt in pairs:
        c = confusion(pred, gt)
        per_image.append(ImageMetrics(str(pid), iou(c), pa(c), precision(c), recall(c)))
        agg = agg + c
    if not per_image:
        raise ValueError("evaluate_masks: empty sample set")
    return EvalReport(
        per_image,
        miou=float(np.mean([m.iou for m in per_image])),
        mpa=float(np.mean([m.pa for m in per_image])),
        mprecision=float(np.mean([m.precision for m in per_image])),
        mrecall=float(np.mean([m.recall for m in per_image])),
        aggregate=agg,
    )


def evaluate_set(predict, samples, threshold=0.5) -> EvalReport:
    """Run ``predict(image) -> ProbMask`` over samples and score each one.

    Report order follows the input order; means are arithmetic means of
    the per-image values.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("evaluate_set: empty sample set")
    pairs = ((str(i), binarize(predict(s.image), threshold), s.mask)
             for i, s in enumerate(samples))
    return evaluate_masks(pairs)
