"""Accuracy and model-calibration metrics (reliability bins, ECE, MCE).

Binning rule: the confidence range [0, 1] splits into K right-closed bins,
bin b covering (b/K, (b+1)/K]; confidences at or below 1/K land in bin 0, so
a confidence of exactly 1.0 stays in range. Empty bins contribute zero to the
expected error and are excluded from the maximum error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


def accuracy(preds: np.ndarray, labels: np.ndarray, mode: str = "overall") -> float:
    """Fraction correct, either overall or averaged over per-class accuracies.

    ``per_class_avg`` skips classes absent from ``labels`` with a warning.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have the same length")
    if preds.size == 0:
        raise ValueError("empty input")
    if mode == "overall":
        return float(np.mean(preds == labels))
    if mode == "per_class_avg":
        classes = np.unique(np.concatenate([labels, preds]))
        rates = []
        for cls in classes:
            in_class = labels == cls
            if not in_class.any():
                warnings.warn(f"class {cls} has no samples; skipped in per-class average")
                continue
            rates.append(float(np.mean(preds[in_class] == cls)))
        return float(np.mean(rates))
    raise ValueError(f"unknown accuracy mode {mode!r}")


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    mean_confidence: float
    accuracy: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    """Per-bin reliability data with ECE/MCE summaries."""

    num_bins: int
    bins: tuple[CalibrationBin, ...]
    ece: float
    mce: float

    def rows(self) -> list[dict]:
        return [
            {"bin_lo": b.lo, "bin_hi": b.hi, "mean_conf": b.mean_confidence,
             "acc": b.accuracy, "count": b.count}
            for b in self.bins
        ]


def calibration(probs: np.ndarray, labels: np.ndarray, num_bins: int = 10) -> CalibrationReport:
    """Reliability bins over max-probability confidence.

    ECE is the count-weighted mean |accuracy - confidence| gap, MCE the
    maximum gap over non-empty bins.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("probs must be a non-empty (samples, classes) matrix")
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probs and labels disagree on sample count")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    confidence = probs.max(axis=1)
    predicted = probs.argmax(axis=1)
    correct = (predicted == labels).astype(np.float64)
    edges = np.arange(1, num_bins) / num_bins
    bin_index = np.digitize(confidence, edges, right=True)

    n = probs.shape[0]
    bins = []
    ece = 0.0
    mce = 0.0
    for b in range(num_bins):
        members = bin_index == b
        count = int(members.sum())
        if count > 0:
            mean_conf = float(confidence[members].mean())
            acc = float(correct[members].mean())
            gap = abs(acc - mean_conf)
            ece += (count / n) * gap
            mce = max(mce, gap)
        else:
            mean_conf = 0.0
            acc = 0.0
        bins.append(CalibrationBin(b / num_bins, (b + 1) / num_bins, mean_conf, acc, count))
    return CalibrationReport(num_bins, tuple(bins), float(ece), float(mce))
