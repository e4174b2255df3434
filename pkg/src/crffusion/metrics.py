"""Depth-map error and accuracy metrics."""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

THRESHOLDS = (1.25, 1.25**2, 1.25**3)


class MetricsDomainError(ValueError):
    def __init__(self, count: int):
        super().__init__(f"{count} unmasked pixel(s) have nonpositive prediction or ground truth")
        self.count = count


@dataclass(frozen=True)
class MetricsReport:
    rel: float
    log10: float
    rms: float
    delta1: float
    delta2: float
    delta3: float

    def csv_line(self) -> str:
        # repr gives the shortest round-tripping form with '.' as separator
        return ",".join(_fmt(v) for v in astuple(self))


def _fmt(value: float) -> str:
    if value == int(value):
        return str(int(value))
    return repr(float(value))


def compute_metrics(prediction, ground_truth, mask=None, denominator: str = "pred") -> MetricsReport:
    """rel, log10, rms and threshold accuracies over the unmasked pixels.

    ``denominator`` selects what rel and the accuracy ratio divide by:
    ``"pred"`` (the prediction) or ``"gt"`` (the ground truth).
    Accuracy counts pixels with ``max(d*/d, d/d*) < t`` strictly.
    """
    pred = np.asarray(prediction, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if denominator not in ("pred", "gt"):
        raise ValueError(f"denominator must be 'pred' or 'gt', got {denominator!r}")
    valid = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if valid.shape != pred.shape:
        raise ValueError("mask shape differs from the prediction")
    pred, gt = pred[valid], gt[valid]
    if pred.size == 0:
        raise ValueError("no unmasked pixels")
    bad = int(np.count_nonzero((pred <= 0) | (gt <= 0)))
    if bad:
        raise MetricsDomainError(bad)

    base = pred if denominator == "pred" else gt
    rel = float(np.mean(np.abs(gt - pred) / base))
    rms = float(np.sqrt(np.mean((gt - pred) ** 2)))
    log10 = float(np.mean(np.abs(np.log10(gt) - np.log10(pred))))
    ratio = np.maximum(pred / gt, gt / pred)
    deltas = [float(np.mean(ratio < t)) for t in THRESHOLDS]
    return MetricsReport(rel, log10, rms, *deltas)
