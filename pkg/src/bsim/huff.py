"""Modified Huff baseline.

Visit probabilities are proportional to exp(alpha . phi_s) * d_ns^(-theta),
normalized over all stores (no truncation radius). Budget weights are the
least-squares coefficients of revenue on the induced regressors
X_sk = sum_n v_nk P_ns, fitted at every point of an (alpha, theta) grid.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import MetricError, nrmse, r_squared
from .model import Dataset

DEFAULT_EXPONENTS = (0.5, 1.0, 1.5, 2.0)
DEFAULT_DECAYS = (0.5, 1.0, 1.5, 2.0, 3.0)
MIN_DISTANCE = 1e-6
RIDGE = 1e-8
SCHEMA_VERSION = 1


class HuffError(ValueError):
    pass


@dataclass
class HuffParams:
    attract_exponents: np.ndarray
    distance_decay: float
    budget_weights: np.ndarray

    def __post_init__(self):
        self.attract_exponents = np.atleast_1d(np.asarray(self.attract_exponents, dtype=float))
        self.budget_weights = np.atleast_1d(np.asarray(self.budget_weights, dtype=float))
        self.distance_decay = float(self.distance_decay)
        if not self.distance_decay > 0:
            raise HuffError(f"distance_decay must be positive, got {self.distance_decay}")

    def to_dict(self) -> dict:
        return {
            "attract_exponents": self.attract_exponents.tolist(),
            "distance_decay": self.distance_decay,
            "budget_weights": self.budget_weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HuffParams":
        return cls(d["attract_exponents"], d["distance_decay"], d["budget_weights"])


def _distances(dataset: Dataset) -> np.ndarray:
    diff = dataset.customer_xy[:, None, :] - dataset.store_xy[None, :, :]
    return np.maximum(np.sqrt(np.einsum("nsk,nsk->ns", diff, diff)), MIN_DISTANCE)


def _probabilities(log_d: np.ndarray, phi: np.ndarray, exponents: np.ndarray, decay: float) -> np.ndarray:
    w = (phi @ exponents)[None, :] - decay * log_d
    w -= w.max(axis=1, keepdims=True)
    np.exp(w, out=w)
    w /= w.sum(axis=1, keepdims=True)
    return w


def huff_probabilities(dataset: Dataset, params: HuffParams) -> np.ndarray:
    """N x S visit probabilities; every row sums to one."""
    if params.attract_exponents.shape[0] != dataset.n_store_features:
        raise HuffError(
            f"{params.attract_exponents.shape[0]} attraction exponents for {dataset.n_store_features} store features"
        )
    return _probabilities(np.log(_distances(dataset)), dataset.store_features, params.attract_exponents,
                          params.distance_decay)


def huff_revenues(dataset: Dataset, params: HuffParams) -> np.ndarray:
    if params.budget_weights.shape[0] != dataset.n_customer_features:
        raise HuffError(
            f"{params.budget_weights.shape[0]} budget weights for {dataset.n_customer_features} customer features"
        )
    p = huff_probabilities(dataset, params)
    return p.T @ (dataset.customer_features @ params.budget_weights)


def _solve(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least squares; falls back to a tiny ridge when X is rank deficient."""
    w, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        k = X.shape[1]
        return np.linalg.solve(X.T @ X + RIDGE * np.eye(k), X.T @ y), True
    return w, False


@dataclass
class HuffFit:
    params: HuffParams
    rss: float
    r_squared: float | None
    nrmse: float | None
    predictions: np.ndarray
    ridge_used: bool
    grid: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": "huff",
            "params": self.params.to_dict(),
            "rss": self.rss,
            "r_squared": self.r_squared,
            "nrmse": self.nrmse,
            "predictions": self.predictions.tolist(),
            "ridge_used": self.ridge_used,
            "grid": self.grid,
        }


def fit_huff(
    dataset: Dataset,
    exponents: Sequence[float] = DEFAULT_EXPONENTS,
    decays: Sequence[float] = DEFAULT_DECAYS,
    per_feature: bool = False,
) -> HuffFit:
    """Grid search over (alpha, theta) with OLS budget weights at each point.

    With ``per_feature`` the exponent grid is the full product over store
    features; otherwise a single exponent is shared by all of them. Among
    equal residual sums of squares the lexicographically smallest grid point
    wins.
    """
    exponents = [float(a) for a in exponents]
    decays = [float(t) for t in decays]
    if not exponents or not decays:
        raise HuffError("exponent and decay grids must be nonempty")
    if any(not t > 0 for t in decays):
        raise HuffError("distance decays must be positive")
    D = dataset.n_store_features
    if per_feature:
        alpha_grid = sorted(itertools.product(sorted(exponents), repeat=D))
    else:
        alpha_grid = [(a,) * D for a in sorted(exponents)]
    log_d = np.log(_distances(dataset))
    V, y, phi = dataset.customer_features, dataset.revenue, dataset.store_features

    best = None
    for alpha in alpha_grid:
        a = np.asarray(alpha, dtype=float)
        for theta in sorted(decays):
            p = _probabilities(log_d, phi, a, theta)
            X = p.T @ V
            w, ridge = _solve(X, y)
            resid = y - X @ w
            rss = float(resid @ resid)
            if best is None or rss < best[0]:
                best = (rss, a, theta, w, ridge, X @ w)
    rss, a, theta, w, ridge, pred = best
    try:
        r2 = r_squared(y, pred)
    except MetricError:
        r2 = None
    try:
        nr = nrmse(y, pred)
    except MetricError:
        nr = None
    return HuffFit(
        params=HuffParams(a, theta, w),
        rss=rss,
        r_squared=r2,
        nrmse=nr,
        predictions=pred,
        ridge_used=ridge,
        grid={"exponents": sorted(exponents), "decays": sorted(decays), "per_feature": per_feature},
    )
