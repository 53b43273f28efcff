"""Accuracy, NLL and expected calibration error with equal-width bins."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, ShapeMismatch

DEFAULT_BINS = 15


@dataclass(frozen=True)
class PredictionBatch:
    probs: np.ndarray  # (n, n_classes)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise ShapeMismatch(f"probs {probs.shape} vs labels {labels.shape}")
        if probs.shape[0] and np.abs(probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("probability rows must sum to 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)  # ties -> lowest class index


@dataclass(frozen=True)
class ReliabilityBins:
    n_bins: int
    lo: np.ndarray
    hi: np.ndarray
    count: np.ndarray
    mean_conf: np.ndarray  # 0 for empty bins
    acc: np.ndarray  # 0 for empty bins

    @property
    def total(self) -> int:
        return int(self.count.sum())


def _require(pred: PredictionBatch):
    if pred.n == 0:
        raise EmptyBatch("no predictions")


def bin_index(conf, n_bins: int) -> np.ndarray:
    """0-based bin for each confidence; bin b holds (b/n_bins, (b+1)/n_bins], 0 goes to bin 0."""
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, np.asarray(conf), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def reliability_rows(pred: PredictionBatch, n_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    _require(pred)
    conf = pred.confidence()
    correct = (pred.predicted() == pred.labels).astype(np.float64)
    idx = bin_index(conf, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    mean_conf = np.zeros(n_bins)
    acc = np.zeros(n_bins)
    for b in np.flatnonzero(count):
        sel = idx == b
        # fsum keeps the result independent of row order
        mean_conf[b] = math.fsum(conf[sel]) / count[b]
        acc[b] = math.fsum(correct[sel]) / count[b]
    edges = np.arange(n_bins + 1) / n_bins
    return ReliabilityBins(n_bins, edges[:-1], edges[1:], count, mean_conf, acc)


def ece_from_bins(bins: ReliabilityBins) -> float:
    n = bins.total
    return math.fsum((bins.count[b] / n) * abs(bins.acc[b] - bins.mean_conf[b]) for b in range(bins.n_bins))


def ece(pred: PredictionBatch, n_bins: int = DEFAULT_BINS) -> float:
    return ece_from_bins(reliability_rows(pred, n_bins))


def accuracy(pred: PredictionBatch) -> float:
    _require(pred)
    return float(np.mean(pred.predicted() == pred.labels))


def nll(pred: PredictionBatch) -> float:
    _require(pred)
    p = pred.probs[np.arange(pred.n), pred.labels]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(float).tiny))))


def write_reliability_csv(path, bins: ReliabilityBins) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "mean_conf", "acc"])
        for b in range(bins.n_bins):
            w.writerow([repr(float(bins.lo[b])), repr(float(bins.hi[b])), int(bins.count[b]),
                        repr(float(bins.mean_conf[b])), repr(float(bins.acc[b]))])
