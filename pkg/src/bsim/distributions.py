"""Diagonal Gaussian and Gamma building blocks.

Gamma distributions are parameterized by shape and *rate* throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class DistributionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# special functions (recurrence up to x >= 10, then asymptotic series)

_SHIFT = 10.0


def _positive_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DistributionError("argument must be positive")
    return arr


def _lgamma_scalar(x: float) -> float:
    acc = 0.0
    while x < _SHIFT:
        acc -= math.log(x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (1 / 12 + inv2 * (-1 / 360 + inv2 * (1 / 1260 + inv2 * (
        -1 / 1680 + inv2 * (1 / 1188 + inv2 * (-691 / 360360 + inv2 / 156))))))
    return (x - 0.5) * math.log(x) - x + 0.5 * LOG_2PI + series + acc


def _digamma_scalar(x: float) -> float:
    acc = 0.0
    while x < _SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = inv2 * (-1 / 12 + inv2 * (1 / 120 + inv2 * (-1 / 252 + inv2 * (
        1 / 240 + inv2 * (-1 / 132 + inv2 * (691 / 32760 - inv2 / 12))))))
    return math.log(x) - 0.5 / x + series + acc


def _trigamma_scalar(x: float) -> float:
    acc = 0.0
    while x < _SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * inv2 * (1 / 6 + inv2 * (-1 / 30 + inv2 * (1 / 42 + inv2 * (
        -1 / 30 + inv2 * (5 / 66 + inv2 * (-691 / 2730 + inv2 * 7 / 6))))))
    return inv + 0.5 * inv2 + series + acc


def _scalar(x):
    if isinstance(x, (float, int, np.floating, np.integer)) and not isinstance(x, bool):
        x = float(x)
        if not x > 0:
            raise DistributionError("argument must be positive")
        return x
    return None


def lgamma(x):
    """log Gamma(x) for x > 0."""
    xs = _scalar(x)
    if xs is not None:
        return _lgamma_scalar(xs)
    x = _positive_array(x).copy()
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] -= np.log(x[small])
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * (1 / 12 + inv2 * (-1 / 360 + inv2 * (1 / 1260 + inv2 * (
        -1 / 1680 + inv2 * (1 / 1188 + inv2 * (-691 / 360360 + inv2 / 156))))))
    out = (x - 0.5) * np.log(x) - x + 0.5 * LOG_2PI + series + acc
    return out if out.ndim else float(out)


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0."""
    xs = _scalar(x)
    if xs is not None:
        return _digamma_scalar(xs)
    x = _positive_array(x).copy()
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _SHIFT
    inv2 = 1.0 / (x * x)
    series = inv2 * (-1 / 12 + inv2 * (1 / 120 + inv2 * (-1 / 252 + inv2 * (
        1 / 240 + inv2 * (-1 / 132 + inv2 * (691 / 32760 - inv2 / 12))))))
    out = np.log(x) - 0.5 / x + series + acc
    return out if out.ndim else float(out)


def trigamma(x):
    """psi'(x) for x > 0."""
    xs = _scalar(x)
    if xs is not None:
        return _trigamma_scalar(xs)
    x = _positive_array(x).copy()
    acc = np.zeros_like(x)
    small = x < _SHIFT
    while np.any(small):
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
        small = x < _SHIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv * inv2 * (1 / 6 + inv2 * (-1 / 30 + inv2 * (1 / 42 + inv2 * (
        -1 / 30 + inv2 * (5 / 66 + inv2 * (-691 / 2730 + inv2 * 7 / 6))))))
    out = inv + 0.5 * inv2 + series + acc
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# distribution types


@dataclass(frozen=True)
class GaussianDiag:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.broadcast_to(np.asarray(self.variance, dtype=float), mean.shape).copy()
        if not np.all(np.isfinite(mean)):
            raise DistributionError("Gaussian mean must be finite")
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise DistributionError("Gaussian variances must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def entropy(self) -> float:
        return float(0.5 * np.sum(LOG_2PI + 1.0 + np.log(self.variance)))


@dataclass(frozen=True)
class GammaDist:
    shape: float
    rate: float

    def __post_init__(self):
        shape, rate = float(self.shape), float(self.rate)
        if not (shape > 0 and rate > 0 and math.isfinite(shape) and math.isfinite(rate)):
            raise DistributionError(f"Gamma needs positive finite shape/rate, got ({shape}, {rate})")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "rate", rate)

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def std(self) -> float:
        return math.sqrt(self.shape) / self.rate

    def mean_log(self) -> float:
        return digamma(self.shape) - math.log(self.rate)


def _check_dims(a: int, b: int) -> None:
    if a != b:
        raise DistributionError(f"dimension mismatch: {a} vs {b}")


def gaussian_logpdf(d: GaussianDiag, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_dims(d.dim, x.shape[0])
    return float(np.sum(-0.5 * (LOG_2PI + np.log(d.variance)) - (x - d.mean) ** 2 / (2.0 * d.variance)))


def gamma_logpdf(d: GammaDist, x: float) -> float:
    if not x > 0:
        raise DistributionError(f"Gamma density needs x > 0, got {x}")
    return d.shape * math.log(d.rate) - lgamma(d.shape) + (d.shape - 1.0) * math.log(x) - d.rate * x


def kl_gaussian(q: GaussianDiag, p: GaussianDiag) -> float:
    _check_dims(q.dim, p.dim)
    return float(0.5 * np.sum(
        np.log(p.variance / q.variance) + (q.variance + (q.mean - p.mean) ** 2) / p.variance - 1.0
    ))


def kl_gamma(q: GammaDist, p: GammaDist) -> float:
    aq, bq, ap, bp = q.shape, q.rate, p.shape, p.rate
    return (
        (aq - ap) * digamma(aq) - lgamma(aq) + lgamma(ap)
        + ap * (math.log(bq) - math.log(bp)) + aq * (bp - bq) / bq
    )


def sample_gaussian(d: GaussianDiag, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    shape = (d.dim,) if size is None else (size, d.dim)
    return d.mean + d.std * rng.standard_normal(shape)


def sample_gamma(d: GammaDist, rng: np.random.Generator, size: int | None = None):
    # numpy's sampler is Marsaglia-Tsang with the shape < 1 boost
    return rng.gamma(d.shape, 1.0 / d.rate, size=size)


def gaussian_quantile(d: GaussianDiag, q: float) -> float:
    if d.dim != 1:
        raise DistributionError("quantile is defined for 1-dim Gaussians only")
    if not 0 < q < 1:
        raise DistributionError(f"quantile level must lie in (0, 1), got {q}")
    return NormalDist(float(d.mean[0]), float(d.std[0])).inv_cdf(q)


def empirical_quantile(samples, q: float) -> float:
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise DistributionError("empty sample vector")
    if not 0 < q < 1:
        raise DistributionError(f"quantile level must lie in (0, 1), got {q}")
    return float(np.quantile(samples, q))
