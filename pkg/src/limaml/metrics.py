from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float | None:
    """Area under the ROC curve via the rank-sum statistic.

    Ties get average ranks, i.e. a tied positive/negative pair counts 1/2.
    Returns None when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_gain(value: float, baseline: float) -> tuple[float, float]:
    """(relative gain in percent of the baseline, absolute difference)."""
    return (value - baseline) / baseline * 100.0, value - baseline
