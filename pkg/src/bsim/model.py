"""Forward model: truncated-Gaussian attraction fields, visit probabilities,
customer budgets, store revenues and the joint log density."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .distributions import (
    GammaDist,
    GaussianDiag,
    LOG_2PI,
    gamma_logpdf,
    gaussian_logpdf,
)
from .geometry import Point2, Polygon, area_fraction, euclidean_distance, pairwise_sq_distances


class ModelError(ValueError):
    pass


class AttractionMode(str, Enum):
    STORE_SPECIFIC = "store_specific"
    FEATURE_DRIVEN = "feature_driven"


@dataclass(frozen=True)
class Store:
    id: str
    location: Point2
    features: np.ndarray
    revenue: float


@dataclass(frozen=True)
class CustomerRegion:
    id: str
    location: Point2
    features: np.ndarray


@dataclass
class Dataset:
    """Stores and customer regions held column-wise.

    ``store_features`` is S x (D-2) and ``customer_features`` is N x (P-2);
    locations are excluded from both.
    """

    store_ids: list[str]
    store_xy: np.ndarray
    store_features: np.ndarray
    revenue: np.ndarray
    customer_ids: list[str]
    customer_xy: np.ndarray
    customer_features: np.ndarray
    region: Polygon | None = None

    def __post_init__(self):
        self.store_xy = np.asarray(self.store_xy, dtype=float).reshape(-1, 2)
        self.customer_xy = np.asarray(self.customer_xy, dtype=float).reshape(-1, 2)
        S, N = self.store_xy.shape[0], self.customer_xy.shape[0]
        if S < 1 or N < 1:
            raise ModelError("dataset needs at least one store and one customer")
        self.store_features = np.asarray(self.store_features, dtype=float).reshape(S, -1)
        self.customer_features = np.asarray(self.customer_features, dtype=float).reshape(N, -1)
        self.revenue = np.asarray(self.revenue, dtype=float).reshape(S)
        self.store_ids = [str(i) for i in self.store_ids]
        self.customer_ids = [str(i) for i in self.customer_ids]
        if len(self.store_ids) != S or len(self.customer_ids) != N:
            raise ModelError("id lists must match the number of rows")
        for name in ("store_xy", "customer_xy", "store_features", "customer_features", "revenue"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name} contains non-finite values")

    @classmethod
    def from_records(
        cls,
        stores: Sequence[Store],
        customers: Sequence[CustomerRegion],
        region: Polygon | None = None,
    ) -> "Dataset":
        if not stores or not customers:
            raise ModelError("dataset needs at least one store and one customer")
        widths = {len(np.atleast_1d(s.features)) for s in stores}
        if len(widths) != 1:
            raise ModelError("stores disagree on feature length")
        widths = {len(np.atleast_1d(c.features)) for c in customers}
        if len(widths) != 1:
            raise ModelError("customers disagree on feature length")
        return cls(
            store_ids=[s.id for s in stores],
            store_xy=[[s.location.x, s.location.y] for s in stores],
            store_features=np.array([np.atleast_1d(s.features) for s in stores], dtype=float),
            revenue=[s.revenue for s in stores],
            customer_ids=[c.id for c in customers],
            customer_xy=[[c.location.x, c.location.y] for c in customers],
            customer_features=np.array([np.atleast_1d(c.features) for c in customers], dtype=float),
            region=region,
        )

    @property
    def n_stores(self) -> int:
        return self.store_xy.shape[0]

    @property
    def n_customers(self) -> int:
        return self.customer_xy.shape[0]

    @property
    def n_store_features(self) -> int:
        return self.store_features.shape[1]

    @property
    def n_customer_features(self) -> int:
        return self.customer_features.shape[1]

    @property
    def stores(self) -> list[Store]:
        return [
            Store(i, Point2(*xy), f.copy(), float(y))
            for i, xy, f, y in zip(self.store_ids, self.store_xy, self.store_features, self.revenue)
        ]

    @property
    def customers(self) -> list[CustomerRegion]:
        return [
            CustomerRegion(i, Point2(*xy), f.copy())
            for i, xy, f in zip(self.customer_ids, self.customer_xy, self.customer_features)
        ]

    def with_revenue(self, revenue) -> "Dataset":
        return replace(self, revenue=np.asarray(revenue, dtype=float).copy())


@dataclass(frozen=True)
class ModelConfig:
    truncation_radius: float
    attraction_mode: AttractionMode = AttractionMode.FEATURE_DRIVEN

    def __post_init__(self):
        if not self.truncation_radius > 0:
            raise ModelError("truncation_radius must be positive")
        object.__setattr__(self, "attraction_mode", AttractionMode(self.attraction_mode))

    @property
    def feature_driven(self) -> bool:
        return self.attraction_mode is AttractionMode.FEATURE_DRIVEN


@dataclass
class ParameterVector:
    beta: np.ndarray
    lambda_: np.ndarray
    epsilon: np.ndarray
    gamma: float
    alpha: float

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.lambda_ = np.atleast_1d(np.asarray(self.lambda_, dtype=float))
        self.epsilon = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        self.gamma = float(self.gamma)
        self.alpha = float(self.alpha)
        if not (self.gamma > 0 and self.alpha > 0):
            raise ModelError("gamma and alpha must be positive")

    def validate(self, dataset: Dataset, config: ModelConfig) -> None:
        if self.beta.shape[0] != dataset.n_customer_features:
            raise ModelError(f"beta has length {self.beta.shape[0]}, expected {dataset.n_customer_features}")
        n_lam = dataset.n_store_features if config.feature_driven else 0
        if self.lambda_.shape[0] != n_lam:
            raise ModelError(f"lambda has length {self.lambda_.shape[0]}, expected {n_lam}")
        if self.epsilon.shape[0] != dataset.n_stores:
            raise ModelError(f"epsilon has length {self.epsilon.shape[0]}, expected {dataset.n_stores}")

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "lambda": self.lambda_.tolist(),
            "epsilon": self.epsilon.tolist(),
            "gamma": self.gamma,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterVector":
        return cls(d["beta"], d.get("lambda", []), d["epsilon"], d["gamma"], d["alpha"])


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters. Gamma priors are (shape, rate)."""

    mu_beta: np.ndarray
    mu_lambda: np.ndarray
    mu_epsilon: np.ndarray
    alpha_shape: float = 1.0
    alpha_rate: float = 1.0
    gamma_shape: float = 1.0
    gamma_rate: float = 1.0
    var_lambda: float = 1.0
    var_epsilon: float = 1.0

    def __post_init__(self):
        for name in ("mu_beta", "mu_lambda", "mu_epsilon"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("alpha_shape", "alpha_rate", "gamma_shape", "gamma_rate", "var_lambda", "var_epsilon"):
            if not float(getattr(self, name)) > 0:
                raise ModelError(f"prior {name} must be positive")

    @classmethod
    def default(cls, dataset: Dataset, config: ModelConfig, **overrides) -> "PriorSpec":
        n_lam = dataset.n_store_features if config.feature_driven else 0
        base = dict(
            mu_beta=np.zeros(dataset.n_customer_features),
            mu_lambda=np.zeros(n_lam),
            mu_epsilon=np.zeros(dataset.n_stores),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def alpha_prior(self) -> GammaDist:
        return GammaDist(self.alpha_shape, self.alpha_rate)

    @property
    def gamma_prior(self) -> GammaDist:
        return GammaDist(self.gamma_shape, self.gamma_rate)

    @property
    def lambda_prior(self) -> GaussianDiag:
        return GaussianDiag(self.mu_lambda, np.full(self.mu_lambda.shape, self.var_lambda))

    @property
    def epsilon_prior(self) -> GaussianDiag:
        return GaussianDiag(self.mu_epsilon, np.full(self.mu_epsilon.shape, self.var_epsilon))

    def to_dict(self) -> dict:
        return {
            "mu_beta": self.mu_beta.tolist(),
            "mu_lambda": self.mu_lambda.tolist(),
            "mu_epsilon": self.mu_epsilon.tolist(),
            "alpha_shape": self.alpha_shape,
            "alpha_rate": self.alpha_rate,
            "gamma_shape": self.gamma_shape,
            "gamma_rate": self.gamma_rate,
            "var_lambda": self.var_lambda,
            "var_epsilon": self.var_epsilon,
        }


@dataclass(frozen=True)
class FieldEntry:
    """One store's truncated Gaussian attraction field."""

    center: Point2
    variance: float
    truncation_radius: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ModelError("attraction variance must be positive")
        if not self.truncation_radius > 0:
            raise ModelError("truncation radius must be positive")


# ---------------------------------------------------------------------------
# scalar operations


def attraction_variance(config: ModelConfig, store_features, lambda_, eps_s: float) -> float:
    if not config.feature_driven:
        return math.exp(eps_s)
    phi = np.atleast_1d(np.asarray(store_features, dtype=float))
    lam = np.atleast_1d(np.asarray(lambda_, dtype=float))
    if phi.shape != lam.shape:
        raise ModelError(f"lambda length {lam.shape[0]} != store feature length {phi.shape[0]}")
    return math.exp(float(lam @ phi) + eps_s)


def log_truncation_mass(variance, truncation_radius: float):
    """log(1 - exp(-d_T^2 / (2 variance)))."""
    return np.log(-np.expm1(-(truncation_radius ** 2) / (2.0 * np.asarray(variance))))


def truncated_gaussian_pdf(entry: FieldEntry, point: Point2) -> float:
    d = euclidean_distance(entry.center, point)
    if d > entry.truncation_radius:
        return 0.0
    var = entry.variance
    return math.exp(-d * d / (2.0 * var)) / (
        2.0 * math.pi * var * -math.expm1(-entry.truncation_radius ** 2 / (2.0 * var))
    )


def customer_budget(customer: CustomerRegion, beta) -> float:
    v = np.atleast_1d(np.asarray(customer.features, dtype=float))
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    if v.shape != b.shape:
        raise ModelError(f"beta length {b.shape[0]} != customer feature length {v.shape[0]}")
    return float(b @ v)


# ---------------------------------------------------------------------------
# vectorized forward model


class ForwardModel:
    """Precomputed geometry for one (dataset, config) pair.

    All methods broadcast over leading sample axes of the parameter arrays,
    so ``upsilon`` may be (S,) or (K, S) and ``beta`` (P-2,) or (K, P-2).
    Work arrays are kept store-major (..., S, N) because reductions over a
    short trailing axis are slow in numpy; public results are (..., N, S).
    """

    def __init__(self, dataset: Dataset, config: ModelConfig):
        self.dataset = dataset
        self.config = config
        self.d2 = pairwise_sq_distances(dataset.customer_xy, dataset.store_xy)
        self.d2_sn = np.ascontiguousarray(self.d2.T)
        self.in_radius = self.d2 <= config.truncation_radius ** 2
        self._out_sn = ~np.ascontiguousarray(self.in_radius.T)
        self.all_in_radius = bool(self.in_radius.all())
        self.covered = self.in_radius.any(axis=1)
        self.phi = dataset.store_features
        self.V = dataset.customer_features
        self.y = dataset.revenue

    @property
    def n_uncovered(self) -> int:
        return int((~self.covered).sum())

    def upsilon(self, lambda_, epsilon) -> np.ndarray:
        eps = np.asarray(epsilon, dtype=float)
        if not self.config.feature_driven:
            return eps
        lam = np.asarray(lambda_, dtype=float)
        if lam.shape[-1] != self.phi.shape[1]:
            raise ModelError(f"lambda length {lam.shape[-1]} != store feature length {self.phi.shape[1]}")
        return lam @ self.phi.T + eps

    def log_field_sn(self, upsilon) -> np.ndarray:
        """log Z_s(m_n), store-major (..., S, N); -inf outside the radius."""
        ups = np.asarray(upsilon, dtype=float)
        var = np.exp(ups)
        per_store = -LOG_2PI - ups - log_truncation_mass(var, self.config.truncation_radius)
        logz = self.d2_sn * (-0.5 / var)[..., :, None]
        logz += per_store[..., :, None]
        if not self.all_in_radius:
            logz[..., self._out_sn] = -np.inf
        return logz

    def probabilities_sn(self, upsilon) -> np.ndarray:
        """Visit probabilities, store-major (..., S, N)."""
        w = self.log_field_sn(upsilon)
        top = w.max(axis=-2, keepdims=True)
        if not self.all_in_radius:
            top[~np.isfinite(top)] = 0.0
        w -= top
        np.exp(w, out=w)
        tot = w.sum(axis=-2, keepdims=True)
        if not self.all_in_radius:
            tot[tot == 0] = 1.0
        w /= tot
        return w

    def log_field(self, upsilon) -> np.ndarray:
        """log Z_s(m_n); -inf outside the truncation radius. Shape (..., N, S)."""
        return np.swapaxes(self.log_field_sn(upsilon), -1, -2)

    def probabilities(self, upsilon) -> np.ndarray:
        return np.swapaxes(self.probabilities_sn(upsilon), -1, -2)

    def budgets(self, beta) -> np.ndarray:
        return np.asarray(beta, dtype=float) @ self.V.T

    def revenues(self, beta, upsilon, probs=None) -> np.ndarray:
        r = self.budgets(beta)
        if probs is None:
            return (self.probabilities_sn(upsilon) @ r[..., :, None])[..., 0]
        return np.einsum("...n,...ns->...s", r, probs)


def visit_probabilities(dataset: Dataset, config: ModelConfig, params: ParameterVector) -> np.ndarray:
    params.validate(dataset, config)
    fm = ForwardModel(dataset, config)
    return fm.probabilities(fm.upsilon(params.lambda_, params.epsilon))


def predict_revenues(
    dataset: Dataset,
    config: ModelConfig,
    params: ParameterVector,
    return_flows: bool = False,
):
    """Expected revenue per store; optionally also the N x S flow matrix r_n p_ns."""
    params.validate(dataset, config)
    fm = ForwardModel(dataset, config)
    p = fm.probabilities(fm.upsilon(params.lambda_, params.epsilon))
    r = fm.budgets(params.beta)
    flows = r[:, None] * p
    yhat = flows.sum(axis=0)
    if return_flows:
        return yhat, flows
    return yhat


def log_joint_terms(
    dataset: Dataset,
    config: ModelConfig,
    params: ParameterVector,
    priors: PriorSpec,
    forward: ForwardModel | None = None,
) -> dict[str, float]:
    params.validate(dataset, config)
    fm = forward or ForwardModel(dataset, config)
    yhat = fm.revenues(params.beta, fm.upsilon(params.lambda_, params.epsilon))
    S = dataset.n_stores
    terms = {
        "likelihood": gaussian_logpdf(GaussianDiag(yhat, np.full(S, 1.0 / params.gamma)), dataset.revenue),
        "beta": gaussian_logpdf(
            GaussianDiag(priors.mu_beta, np.full(priors.mu_beta.shape, 1.0 / params.alpha)), params.beta
        ),
        "alpha": gamma_logpdf(priors.alpha_prior, params.alpha),
        "gamma": gamma_logpdf(priors.gamma_prior, params.gamma),
    }
    if config.feature_driven:
        terms["lambda"] = gaussian_logpdf(priors.lambda_prior, params.lambda_)
    terms["epsilon"] = gaussian_logpdf(priors.epsilon_prior, params.epsilon)
    return terms


def log_joint(
    dataset: Dataset,
    config: ModelConfig,
    params: ParameterVector,
    priors: PriorSpec,
    forward: ForwardModel | None = None,
) -> float:
    terms = log_joint_terms(dataset, config, params, priors, forward)
    for name, value in terms.items():
        if not math.isfinite(value):
            raise ModelError(f"log joint term '{name}' is not finite ({value})")
    return math.fsum(terms.values())


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class EdgeCorrection:
    eta_factor: float = 0.25
    n_samples: int = 100_000
    seed: int = 0


@dataclass
class PreprocessReport:
    area_fractions: list[float] | None = None
    log_revenue: bool = False
    store_feature_mean: list[float] = field(default_factory=list)
    store_feature_std: list[float] = field(default_factory=list)
    customer_feature_mean: list[float] = field(default_factory=list)
    customer_feature_std: list[float] = field(default_factory=list)
    n_uncovered_customers: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _standardize(X: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if X.shape[1] == 0:
        return X, np.zeros(0), np.zeros(0)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    for j, s in enumerate(std):
        if not s > 1e-12 * max(1.0, abs(mean[j])):
            raise ModelError(f"{label} feature column f{j + 1} has zero variance")
    return (X - mean) / std, mean, std


def preprocess(
    dataset: Dataset,
    config: ModelConfig,
    edge: EdgeCorrection | None = None,
    log_revenue: bool = False,
    standardize_stores: bool = True,
    standardize_customers: bool = True,
) -> tuple[Dataset, PreprocessReport]:
    """Edge correction, then optional log revenue, then feature z-scoring.

    Customer budgets have no intercept, so centring the customer features
    removes the overall spending level; ``standardize_customers=False`` keeps
    them on their original scale.
    """
    report = PreprocessReport(log_revenue=log_revenue)
    revenue = dataset.revenue.copy()

    if edge is not None:
        if dataset.region is None:
            raise ModelError("edge correction requires a study region polygon")
        eta = config.truncation_radius * edge.eta_factor
        fractions = [
            area_fraction(Point2(*xy), eta, dataset.region, edge.n_samples, edge.seed + s)
            for s, xy in enumerate(dataset.store_xy)
        ]
        revenue = revenue * np.asarray(fractions)
        report.area_fractions = fractions

    if log_revenue:
        bad = np.flatnonzero(~(revenue > 0))
        if bad.size:
            raise ModelError(f"cannot log-transform nonpositive revenue of store {dataset.store_ids[bad[0]]}")
        revenue = np.log(revenue)

    store_features, customer_features = dataset.store_features, dataset.customer_features
    if standardize_stores:
        store_features, m, s = _standardize(store_features, "store")
        report.store_feature_mean, report.store_feature_std = m.tolist(), s.tolist()
    if standardize_customers:
        customer_features, m, s = _standardize(customer_features, "customer")
        report.customer_feature_mean, report.customer_feature_std = m.tolist(), s.tolist()

    out = replace(
        dataset,
        revenue=revenue,
        store_features=store_features.copy(),
        customer_features=customer_features.copy(),
    )
    report.n_uncovered_customers = ForwardModel(out, config).n_uncovered
    return out, report


def apply_feature_scaling(dataset: Dataset, report: PreprocessReport) -> Dataset:
    """Scale features with statistics recorded at training time (revenue untouched)."""
    def scale(X, mean, std, label):
        if not mean:
            return X.copy()
        if len(mean) != X.shape[1]:
            raise ModelError(f"{label} features: {X.shape[1]} columns, scaling recorded for {len(mean)}")
        return (X - np.asarray(mean)) / np.asarray(std)

    return replace(
        dataset,
        store_features=scale(dataset.store_features, report.store_feature_mean, report.store_feature_std, "store"),
        customer_features=scale(
            dataset.customer_features, report.customer_feature_mean, report.customer_feature_std, "customer"
        ),
    )
