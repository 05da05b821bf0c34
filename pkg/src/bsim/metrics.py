"""Evaluation statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionPair:
    observed: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=float).ravel()
        pred = np.asarray(self.predicted, dtype=float).ravel()
        if obs.size == 0 or obs.shape != pred.shape:
            raise MetricError("observed and predicted must have equal nonzero length")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "predicted", pred)


def r_squared(observed, predicted) -> float:
    p = PredictionPair(observed, predicted)
    ss_tot = float(np.sum((p.observed - p.observed.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("observed values have zero variance; R^2 undefined")
    ss_res = float(np.sum((p.observed - p.predicted) ** 2))
    return 1.0 - ss_res / ss_tot


def nrmse(observed, predicted) -> float:
    """RMSE divided by the mean of the observations."""
    p = PredictionPair(observed, predicted)
    mean = float(p.observed.mean())
    if mean == 0.0:
        raise MetricError("observed mean is zero; NRMSE undefined")
    return float(np.sqrt(np.mean((p.observed - p.predicted) ** 2))) / mean


def bias_mse_coverage(estimates, cis: Sequence[tuple[float, float]], truth: float) -> tuple[float, float, float]:
    est = np.asarray(estimates, dtype=float).ravel()
    ci = np.asarray(cis, dtype=float).reshape(-1, 2)
    if est.size == 0 or est.size != ci.shape[0]:
        raise MetricError("need one credible interval per estimate")
    if np.any(ci[:, 0] > ci[:, 1]):
        raise MetricError("credible interval with lower bound above upper bound")
    err = est - truth
    covered = (ci[:, 0] <= truth) & (truth <= ci[:, 1])
    return float(err.mean()), float(np.mean(err ** 2)), float(covered.mean())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation; ties receive average ranks."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size or a.size < 2:
        raise MetricError("spearman needs two vectors of equal length >= 2")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0.0:
        raise MetricError("spearman undefined for a constant vector")
    return float(np.clip(np.sum(ra * rb) / denom, -1.0, 1.0))
