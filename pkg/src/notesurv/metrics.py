"""ROC/AUC, Harrell's concordance index and confusion matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: float
    fp: float
    fn: float
    tp: float
    threshold: float = 0.5

    @property
    def total(self) -> float:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def accuracy(self) -> float:
        return (self.tn + self.tp) / self.total

    def as_array(self) -> np.ndarray:
        return np.array([[self.tn, self.fp], [self.fn, self.tp]], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


def confusion(probs, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions ``prob >= threshold`` against labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if probs.size == 0:
        raise ValueError("confusion matrix of an empty sample")
    if probs.shape != labels.shape:
        raise ValueError("probs and labels differ in length")
    pred = probs >= threshold
    pos = labels == 1
    return ConfusionMatrix(tn=int(np.sum(~pred & ~pos)), fp=int(np.sum(pred & ~pos)),
                           fn=int(np.sum(~pred & pos)), tp=int(np.sum(pred & pos)),
                           threshold=threshold)


def mean_confusion(matrices) -> ConfusionMatrix:
    matrices = list(matrices)
    stacked = np.array([[m.tn, m.fp, m.fn, m.tp] for m in matrices], dtype=np.float64)
    tn, fp, fn, tp = stacked.mean(axis=0)
    return ConfusionMatrix(tn, fp, fn, tp, matrices[0].threshold)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[list[float]]:
        return [[float(a), float(b)] for a, b in zip(self.fpr, self.tpr)]

    def trapezoid_auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [xs.size]])
    ranks = np.empty(x.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0  # 1-based average of s+1..e
    return ranks


def roc_auc(scores, labels) -> RocCurve:
    """Mann-Whitney AUC (ties count 1/2) and the threshold-sweep ROC curve."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("ROC AUC needs both classes present")
    ranks = _average_ranks(scores)
    auc = (ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)

    thresholds = np.unique(scores)[::-1]
    # counts of scores >= each threshold, by class
    tp = n1 - np.searchsorted(np.sort(scores[pos]), thresholds, side="left")
    fp = n0 - np.searchsorted(np.sort(scores[~pos]), thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / n0])
    tpr = np.concatenate([[0.0], tp / n1])
    return RocCurve(fpr, tpr, np.concatenate([[np.inf], thresholds]), float(auc))


def c_index(risks, times, events) -> float:
    """Harrell's C: share of comparable pairs ordered correctly by risk.

    A pair (i, j) is comparable when i has an observed event and either
    T_i < T_j, or T_i == T_j with j censored.  Higher risk should mean
    earlier event; tied risks count 1/2.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    d = np.asarray(events).astype(bool)
    num = 0.0
    den = 0.0
    # row blocks keep memory at O(block * n)
    block = max(1, 2_000_000 // max(1, r.size))
    for start in range(0, r.size, block):
        sl = slice(start, start + block)
        ti, ri, di = t[sl, None], r[sl, None], d[sl, None]
        comparable = di & ((ti < t) | ((ti == t) & ~d))
        num += np.sum(comparable & (ri > r)) + 0.5 * np.sum(comparable & (ri == r))
        den += np.sum(comparable)
    if den == 0:
        raise ValueError("c-index undefined: no comparable pairs")
    return float(num / den)


def metric_report(auc=None, c=None, cm: ConfusionMatrix | None = None,
                  roc: RocCurve | None = None, **extra) -> dict:
    return {
        "auc": auc,
        "c_index": c,
        "confusion": cm.to_dict() if cm else None,
        "roc_points": roc.points if roc else None,
        **extra,
    }


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path
