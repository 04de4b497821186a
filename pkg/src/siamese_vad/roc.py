"""Threshold-sweep ROC helpers shared by training and evaluation."""

from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError


def roc_points(scores, labels):
    """Sweep every distinct score as a ``score >= threshold`` detector.

    Returns ``(thresholds, fpr, tpr)`` starting at the empty detector
    (threshold = +inf, point (0, 0)). Tied scores move in one step, so a run
    of ties becomes a single slanted segment.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both positive and negative examples")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    thr = np.r_[np.inf, s[last]]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return thr, fpr, tpr


def area_upto(x, y, cap):
    """Trapezoidal area under a polyline with nondecreasing ``x``, clipped at ``x = cap``.

    If the curve stops short of ``cap`` it is extended horizontally from its
    last point.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    area = 0.0
    for i in range(1, x.size):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x0 >= cap:
            break
        if x1 > cap:
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += (x1 - x0) * (y0 + y1) / 2
    if x.size and x[-1] < cap:
        area += (cap - x[-1]) * y[-1]
    return float(area)


def equal_error_rate(fpr, tpr):
    """Crossing of FPR with the miss rate 1 - TPR, interpolated linearly."""
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    g = fpr - (1 - tpr)
    hit = np.nonzero(g == 0)[0]
    if hit.size:
        return float(fpr[hit[0]])
    cross = np.nonzero((g[:-1] < 0) & (g[1:] > 0))[0]
    if not cross.size:
        return float("nan")
    i = cross[0]
    w = -g[i] / (g[i + 1] - g[i])
    return float(fpr[i] + w * (fpr[i + 1] - fpr[i]))


def partial_auc(scores, labels, fpr_cap: float = 0.3) -> float:
    """Unnormalized ROC area over FPR in [0, fpr_cap]; positives are label 1."""
    _, fpr, tpr = roc_points(scores, labels)
    return area_upto(fpr, tpr, fpr_cap)
