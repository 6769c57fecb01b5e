"""Prediction metrics shared by model diagnostics and cross-validation."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


def auc(labels, scores) -> float:
    """Rank-based (Mann-Whitney) AUC with average ranks for ties."""
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    if y.shape != s.shape:
        raise ValidationError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rmse(observed, predicted) -> float:
    r = np.asarray(observed, dtype=float) - np.asarray(predicted, dtype=float)
    return float(np.sqrt(np.mean(r * r)))


def r_squared(observed, predicted) -> float:
    y = np.asarray(observed, dtype=float)
    r = y - np.asarray(predicted, dtype=float)
    tss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(r * r)) / tss if tss > 0 else 0.0
