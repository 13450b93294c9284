"""Accuracy assessment: confusion matrix, OA / AA / kappa, rejection curves."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(10))


def confusion(truth, pred, n_classes=None):
    """K x K counts, rows = truth, columns = prediction, labels 1..K."""
    truth = np.asarray(truth).ravel()
    pred = np.asarray(pred).ravel()
    if truth.size != pred.size:
        raise ValueError(f"length mismatch: {truth.size} truth vs {pred.size} predicted labels")
    if truth.size == 0:
        raise ValueError("no samples to score")
    if not (np.issubdtype(truth.dtype, np.integer) or np.all(truth == np.round(truth))):
        raise ValueError("labels must be integers")
    truth = truth.astype(int)
    pred = pred.astype(int)
    K = int(max(truth.max(), pred.max())) if n_classes is None else n_classes
    if min(truth.min(), pred.min()) < 1 or max(truth.max(), pred.max()) > K:
        raise ValueError(f"labels must lie in 1..{K}")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def oa_aa_kappa(cm):
    """Overall accuracy, average accuracy (mean per-class recall) and Cohen's kappa.

    Classes with no reference samples are left out of AA.
    """
    cm = np.asarray(cm, dtype=float)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    oa = np.trace(cm) / total
    rows = cm.sum(axis=1)
    present = rows > 0
    aa = float(np.mean(np.diag(cm)[present] / rows[present]))
    pe = float(np.sum(rows * cm.sum(axis=0))) / total ** 2
    if np.isclose(pe, 1.0):
        warnings.warn("chance agreement is 1; kappa defined as 0", RuntimeWarning)
        kappa = 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return float(oa), aa, float(kappa)


@dataclass
class Summary:
    oa: float
    aa: float
    kappa: float
    n: int

    def formatted(self):
        """Table-style strings: OA/AA in percent with one decimal, kappa with two."""
        return f"{100 * self.oa:.1f}", f"{100 * self.aa:.1f}", f"{self.kappa:.2f}"


def summarize(truth, pred, n_classes=None):
    cm = confusion(truth, pred, n_classes)
    return Summary(*oa_aa_kappa(cm), n=int(cm.sum())), cm


def rejection_curve(probs, truth, thresholds=DEFAULT_THRESHOLDS):
    """Accuracy on the samples whose top probability reaches each threshold.

    Returns a list of ``(threshold, rejection_rate, oa, retained)`` tuples;
    thresholds that reject every sample are omitted.
    """
    P = np.asarray(probs, dtype=float)
    truth = np.asarray(truth).ravel().astype(int)
    if P.ndim != 2 or P.shape[0] != truth.size:
        raise ValueError("probs must be (N, K) with one row per truth label")
    th = np.asarray(thresholds, dtype=float)
    if np.any(np.diff(th) <= 0) or th.min() < 0 or th.max() >= 1:
        raise ValueError("thresholds must increase strictly within [0, 1)")
    conf = P.max(axis=1)
    correct = (np.argmax(P, axis=1) + 1) == truth
    out = []
    for t in th:
        keep = conf >= t
        n = int(keep.sum())
        if n == 0:
            continue
        out.append((float(t), 1.0 - n / truth.size, float(correct[keep].mean()), n))
    return out


def write_confusion_csv(path, cm, class_names=None):
    K = cm.shape[0]
    names = class_names or [str(k) for k in range(1, K + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred"] + list(names))
        for name, row in zip(names, cm):
            w.writerow([name] + [int(v) for v in row])


def write_summary_csv(path, summary: Summary):
    oa, aa, kappa = summary.formatted()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "oa", "aa", "kappa", "oa_pct", "aa_pct", "kappa_2dp"])
        w.writerow([summary.n, repr(summary.oa), repr(summary.aa), repr(summary.kappa), oa, aa, kappa])


def write_rejection_csv(path, curve, thresholds=None):
    """One row per threshold; thresholds missing from ``curve`` (everything
    rejected) are written with rejection rate 1 and OA ``nan``."""
    points = {t: (rate, oa) for t, rate, oa, _ in curve}
    grid = [t for t, *_ in curve] if thresholds is None else [float(t) for t in thresholds]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "rejection_rate", "oa"])
        for t in grid:
            rate, oa = points.get(t, (1.0, float("nan")))
            w.writerow([repr(t), repr(rate), repr(oa)])
