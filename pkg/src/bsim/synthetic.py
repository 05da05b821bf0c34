"""Synthetic data generation and replicate studies."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import pairwise_sq_distances
from .metrics import bias_mse_coverage, nrmse, r_squared
from .model import (
    AttractionMode,
    Dataset,
    ForwardModel,
    ModelConfig,
    ParameterVector,
    PriorSpec,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_CUSTOMERS = 2000


class StudyError(RuntimeError):
    pass


@dataclass
class SimSpec:
    n_stores: int = 10
    n_customers: int = 1000
    true_beta: list[float] = field(default_factory=lambda: [-0.2, 0.4])
    true_lambda: list[float] = field(default_factory=lambda: [0.1, 0.5])
    true_gamma: float = 4.0
    lengthscales: list[float] = field(default_factory=lambda: [4.0, 1.0])
    # offsets added to the standardized GP features so that total spend is positive
    feature_means: list[float] = field(default_factory=lambda: [0.5, 0.5])
    domain: float = 10.0
    truncation_radius: float | None = None
    n_replicates: int = 20
    seed: int = 0

    def __post_init__(self):
        self.true_beta = [float(b) for b in self.true_beta]
        self.true_lambda = [float(v) for v in self.true_lambda]
        self.lengthscales = [float(v) for v in self.lengthscales]
        self.feature_means = [float(v) for v in self.feature_means]
        if self.truncation_radius is None:
            self.truncation_radius = 2.0 * math.sqrt(2.0) * self.domain
        self.validate()

    def validate(self) -> None:
        checks = [
            ("n_stores", self.n_stores >= 1),
            ("n_customers", 1 <= self.n_customers <= MAX_CUSTOMERS),
            ("true_gamma", self.true_gamma > 0),
            ("domain", self.domain > 0),
            ("truncation_radius", self.truncation_radius > 0),
            ("n_replicates", self.n_replicates >= 1),
            ("lengthscales", len(self.lengthscales) == len(self.true_beta) and all(v > 0 for v in self.lengthscales)),
            ("feature_means", len(self.feature_means) == len(self.true_beta)),
            ("true_lambda", len(self.true_lambda) >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid SimSpec field '{name}'")

    @classmethod
    def sim1(cls, **kw) -> "SimSpec":
        return cls(**{"n_stores": 10, "n_customers": 1000, **kw})

    @classmethod
    def sim2(cls, **kw) -> "SimSpec":
        return cls(**{"n_stores": 50, "n_customers": 2000, **kw})

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.truncation_radius, AttractionMode.FEATURE_DRIVEN)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimSpec field(s): {sorted(unknown)}")
        return cls(**d)


def se_kernel(a: np.ndarray, b: np.ndarray, lengthscale: float) -> np.ndarray:
    """Unit-variance squared-exponential kernel."""
    return np.exp(-pairwise_sq_distances(a, b) / (2.0 * lengthscale ** 2))


def sample_gp_feature(
    locations: np.ndarray,
    lengthscale: float,
    rng: np.random.Generator,
    nugget: float = 1e-6,
) -> np.ndarray:
    """One standardized draw of a zero-mean GP at ``locations`` (n, 2)."""
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    n = locations.shape[0]
    if n < 1:
        raise ValueError("need at least one location")
    K = se_kernel(locations, locations, lengthscale)
    for _ in range(4):
        try:
            L = np.linalg.cholesky(K + nugget * np.eye(n))
            break
        except np.linalg.LinAlgError:
            nugget *= 10.0
    else:
        raise StudyError(f"Cholesky failed for lengthscale {lengthscale} even with nugget {nugget / 10:g}")
    f = L @ rng.standard_normal(n)
    if n == 1:
        return f - f.mean()
    return (f - f.mean()) / f.std()


def generate_dataset(spec: SimSpec, replicate_index: int = 0) -> tuple[Dataset, ParameterVector]:
    """One synthetic dataset plus the parameters that generated it.

    The returned ``alpha`` is a placeholder: it plays no part in generation.
    """
    rng = np.random.default_rng([spec.seed, replicate_index])
    S, N = spec.n_stores, spec.n_customers
    cust_xy = rng.uniform(0.0, spec.domain, size=(N, 2))
    feats = np.column_stack([
        sample_gp_feature(cust_xy, ls, rng) + mu for ls, mu in zip(spec.lengthscales, spec.feature_means)
    ])
    store_xy = rng.uniform(0.0, spec.domain, size=(S, 2))
    phi = rng.gamma(1.0, 1.0, size=(S, len(spec.true_lambda)))

    truth = ParameterVector(spec.true_beta, spec.true_lambda, np.zeros(S), spec.true_gamma, 1.0)
    ds = Dataset(
        store_ids=[f"s{i + 1}" for i in range(S)],
        store_xy=store_xy,
        store_features=phi,
        revenue=np.zeros(S),
        customer_ids=[f"c{i + 1}" for i in range(N)],
        customer_xy=cust_xy,
        customer_features=feats,
    )
    fm = ForwardModel(ds, spec.model_config)
    yhat = fm.revenues(truth.beta, fm.upsilon(truth.lambda_, truth.epsilon))
    ds.revenue = yhat + rng.standard_normal(S) / math.sqrt(spec.true_gamma)
    return ds, truth


def morans_i(values: np.ndarray, locations: np.ndarray, k: int = 10) -> float:
    """Moran's I over a row-standardized k-nearest-neighbour graph."""
    d2 = pairwise_sq_distances(locations, locations)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1)[:, :k]
    z = values - values.mean()
    lagged = z[nn].mean(axis=1)
    return float(len(z) * np.sum(z * lagged) / (len(z) * np.sum(z * z)))


# ---------------------------------------------------------------------------
# replicate study


@dataclass
class MethodFit:
    """What a study needs from one fitted model."""

    summary: dict[str, dict]
    wall_time: float
    predictions: np.ndarray | None = None


Fitter = Callable[[Dataset, ModelConfig, PriorSpec], MethodFit]


def truth_table(truth: ParameterVector) -> dict[str, float]:
    out = {f"beta_{i + 1}": float(b) for i, b in enumerate(truth.beta)}
    out.update({f"lambda_{i + 1}": float(v) for i, v in enumerate(truth.lambda_)})
    out["gamma"] = truth.gamma
    return out


def plug_in_predictions(dataset: Dataset, config: ModelConfig, summary: Mapping[str, dict]) -> np.ndarray:
    """Store revenues evaluated at the posterior-mean parameters."""
    def block(prefix, n):
        return np.array([summary[f"{prefix}_{i + 1}"]["mean"] for i in range(n)])

    fm = ForwardModel(dataset, config)
    beta = block("beta", dataset.n_customer_features)
    lam = block("lambda", dataset.n_store_features) if config.feature_driven else np.zeros(0)
    eps = block("epsilon", dataset.n_stores)
    return fm.revenues(beta, fm.upsilon(lam, eps))


def vi_fitter(vi_config=None) -> Fitter:
    from .vi import fit_vi, summarize

    def fit(dataset, config, priors):
        res = fit_vi(dataset, config, priors, vi_config)
        return MethodFit(summarize(res.state, seed=res.seed), res.wall_time)

    return fit


def mcmc_fitter(mcmc_config=None) -> Fitter:
    from .mcmc import chain_summary, run_chain

    def fit(dataset, config, priors):
        chain = run_chain(dataset, config, priors, mcmc_config)
        return MethodFit(chain_summary(chain), chain.wall_time)

    return fit


@dataclass
class StudyReport:
    n_replicates: int
    metrics: dict[str, dict[str, dict[str, float]]]     # method -> parameter -> {bias, mse, coverage}
    fit_metrics: dict[str, dict[str, float]]             # method -> {r2, nrmse, wall_time, ...}
    failures: dict[str, int]
    rows: list[dict]
    spec: dict

    def timing(self) -> dict[str, dict[str, float]]:
        keys = ("wall_time_total", "wall_time_mean")
        return {m: {k: fm[k] for k in keys if k in fm} for m, fm in self.fit_metrics.items()}

    def to_dict(self, include_timing: bool = True) -> dict:
        fit_metrics = self.fit_metrics
        if not include_timing:
            fit_metrics = {m: {k: v for k, v in fm.items() if not k.startswith("wall_time")}
                           for m, fm in fit_metrics.items()}
        return {
            "schema_version": SCHEMA_VERSION,
            "n_replicates": self.n_replicates,
            "metrics": self.metrics,
            "fit_metrics": fit_metrics,
            "failures": self.failures,
            "spec": self.spec,
        }

    def write(self, json_path: str | Path, csv_path: str | Path, timing_path: str | Path | None = None) -> None:
        """Write the report. With ``timing_path`` the wall times go to their own
        file, which leaves the other two byte-identical across reruns."""
        split = timing_path is not None
        Path(json_path).write_text(json.dumps(self.to_dict(include_timing=not split), indent=2, sort_keys=True) + "\n")
        if split:
            Path(timing_path).write_text(json.dumps(self.timing(), indent=2, sort_keys=True) + "\n")
        cols = ["replicate", "method", "parameter", "truth", "estimate", "ci_lo", "ci_hi"]
        if not split:
            cols.append("wall_time")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({c: row[c] for c in cols})


def run_study(
    spec: SimSpec,
    methods: Sequence[str] | Mapping[str, Fitter] = ("vi", "mcmc"),
    vi_config=None,
    mcmc_config=None,
    priors_factory: Callable[[Dataset, ModelConfig], PriorSpec] | None = None,
) -> StudyReport:
    """Generate ``spec.n_replicates`` datasets, fit every method, aggregate.

    ``methods`` may map names to custom fitters (used for stubbing).
    """
    if isinstance(methods, Mapping):
        fitters = dict(methods)
    else:
        builders = {"vi": lambda: vi_fitter(vi_config), "mcmc": lambda: mcmc_fitter(mcmc_config)}
        unknown = set(methods) - set(builders)
        if unknown:
            raise ValueError(f"unknown method(s): {sorted(unknown)}")
        fitters = {m: builders[m]() for m in methods}

    config = spec.model_config
    rows: list[dict] = []
    estimates: dict[str, dict[str, list]] = {m: {} for m in fitters}
    fit_stats: dict[str, dict[str, list]] = {m: {"r2": [], "nrmse": [], "wall_time": []} for m in fitters}
    failures = {m: 0 for m in fitters}
    truth_by_param: dict[str, float] = {}

    for rep in range(spec.n_replicates):
        dataset, truth = generate_dataset(spec, rep)
        truth_by_param = truth_table(truth)
        priors = (priors_factory or PriorSpec.default)(dataset, config)
        for name, fitter in fitters.items():
            t0 = time.perf_counter()
            try:
                fit = fitter(dataset, config, priors)
            except Exception as exc:  # noqa: BLE001 - a failed replicate is recorded, not fatal
                log.warning("replicate %d: %s failed: %s", rep, name, exc)
                failures[name] += 1
                continue
            wall = fit.wall_time if fit.wall_time is not None else time.perf_counter() - t0
            preds = fit.predictions
            if preds is None:
                preds = plug_in_predictions(dataset, config, fit.summary)
            fit_stats[name]["r2"].append(r_squared(dataset.revenue, preds))
            fit_stats[name]["nrmse"].append(nrmse(dataset.revenue, preds))
            fit_stats[name]["wall_time"].append(wall)
            for param, true_value in truth_by_param.items():
                s = fit.summary[param]
                estimates[name].setdefault(param, []).append((s["mean"], tuple(s["ci"])))
                rows.append({
                    "replicate": rep, "method": name, "parameter": param, "truth": true_value,
                    "estimate": s["mean"], "ci_lo": s["ci"][0], "ci_hi": s["ci"][1], "wall_time": wall,
                })

    for name, n_fail in failures.items():
        if n_fail > 0.2 * spec.n_replicates:
            raise StudyError(f"{name}: {n_fail} of {spec.n_replicates} replicates failed")

    metrics: dict[str, dict[str, dict[str, float]]] = {}
    for name, per_param in estimates.items():
        metrics[name] = {}
        for param, vals in per_param.items():
            est = [v[0] for v in vals]
            cis = [v[1] for v in vals]
            bias, mse, cov = bias_mse_coverage(est, cis, truth_by_param[param])
            metrics[name][param] = {"bias": bias, "mse": mse, "coverage": cov}
    fit_metrics = {
        name: {
            "r2": float(np.mean(st["r2"])) if st["r2"] else float("nan"),
            "nrmse": float(np.mean(st["nrmse"])) if st["nrmse"] else float("nan"),
            "wall_time_total": float(np.sum(st["wall_time"])),
            "wall_time_mean": float(np.mean(st["wall_time"])) if st["wall_time"] else float("nan"),
        }
        for name, st in fit_stats.items()
    }
    return StudyReport(spec.n_replicates, metrics, fit_metrics, failures, rows, spec.to_dict())
