"""Segmentation mIoU over novel classes and expected calibration error."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    mean_conf: float
    accuracy: float
    count: int


@dataclass
class MetricsReport:
    miou: float = 0.0
    per_class_iou: dict = field(default_factory=dict)
    ece: float = 0.0
    bins: list = field(default_factory=list)
    episodes: int = 0


def _check_labels(labels, n_way, what):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > n_way):
        raise ValueError(f"{what} labels outside [0, {n_way}]")
    return labels


def miou(pred_labels, true_labels, n_way: int):
    """Mean IoU over the novel classes 1..N (background excluded).

    A class absent from both prediction and ground truth is skipped; a class
    present on only one side scores 0. Returns (miou, per-class dict).
    """
    pred = _check_labels(pred_labels, n_way, "predicted")
    true = _check_labels(true_labels, n_way, "true")
    if pred.shape != true.shape:
        raise ValueError("prediction/truth length mismatch")
    per_class = {}
    for c in range(1, n_way + 1):
        p, t = pred == c, true == c
        union = int(np.sum(p | t))
        if union == 0:
            continue
        per_class[c] = float(np.sum(p & t)) / union
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class


def confidence_bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-width right-closed bins on [0, 1]: edge values fall to the lower
    bin, except 0.0 which goes to the first."""
    idx = np.ceil(np.asarray(conf) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def ece(probs, pred_labels, true_labels, n_bins: int = 15):
    """Expected calibration error with equal-width confidence bins.

    Confidence is the max class probability. Returns (ece, bins) where bins
    carry (lo, hi, mean confidence, accuracy, count); empty bins report 0.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("empty prediction set")
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    conf = probs.max(axis=1)
    correct = (pred == true).astype(np.float64)
    idx = confidence_bin_index(conf, n_bins)
    n = conf.size
    total = 0.0
    bins = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        lo, hi = b / n_bins, (b + 1) / n_bins
        if count == 0:
            bins.append(ReliabilityBin(lo, hi, 0.0, 0.0, 0))
            continue
        mean_conf = float(conf[sel].mean())
        acc = float(correct[sel].mean())
        total += (count / n) * abs(acc - mean_conf)
        bins.append(ReliabilityBin(lo, hi, mean_conf, acc, count))
    return total, bins


def merge_bins(bin_lists) -> list:
    """Pool reliability bins from several episodes (same binning everywhere)."""
    merged = []
    for parts in zip(*bin_lists):
        count = sum(b.count for b in parts)
        if count == 0:
            merged.append(ReliabilityBin(parts[0].lo, parts[0].hi, 0.0, 0.0, 0))
        else:
            conf = sum(b.mean_conf * b.count for b in parts) / count
            acc = sum(b.accuracy * b.count for b in parts) / count
            merged.append(ReliabilityBin(parts[0].lo, parts[0].hi, conf, acc, count))
    return merged


def save_reliability_csv(path, bins):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,mean_conf,accuracy,count\n")
        for b in bins:
            fh.write(f"{b.lo:.17g},{b.hi:.17g},{b.mean_conf:.17g},{b.accuracy:.17g},{b.count}\n")
