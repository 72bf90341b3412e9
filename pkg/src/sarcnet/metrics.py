"""Regression evaluation metrics: Spearman, MAE, MSE, R^2."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, DimensionError


def _as_pair(a, b, min_len: int):
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < min_len:
        raise DegenerateInputError(f"need at least {min_len} values, got {x.size}")
    return x, y


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their rank span."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Pearson correlation of average ranks; errors on constant input."""
    x, y = _as_pair(a, b, 3)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInputError("spearman undefined for constant input")
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def mae(pred, target) -> float:
    p, t = _as_pair(pred, target, 1)
    return float(np.abs(p - t).mean())


def mse(pred, target) -> float:
    p, t = _as_pair(pred, target, 1)
    return float(((p - t) ** 2).mean())


def r2(pred, target) -> float:
    """Coefficient of determination, 1 - SS_res/SS_tot."""
    p, t = _as_pair(pred, target, 1)
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot <= 0.0:
        raise DegenerateInputError("r2 undefined for constant target")
    ss_res = float(((t - p) ** 2).sum())
    return 1.0 - ss_res / ss_tot
