"""Blockwise adaptive random-walk Metropolis over the model parameters.

The chain runs on unconstrained coordinates u = (beta, lambda, epsilon,
log gamma, log alpha). During warm-up each block's proposal is tuned: a
Robbins-Monro update of its log step size toward the target acceptance rate,
plus a periodic refresh of the proposal shape from the warm-up draws.
Everything is frozen once warm-up ends.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .distributions import LOG_2PI, lgamma
from .model import Dataset, ForwardModel, ModelConfig, ParameterVector, PriorSpec, log_joint

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


MIN_STUCK_EVIDENCE = 50


class MCMCError(RuntimeError):
    pass


@dataclass
class MCMCConfig:
    iterations: int = 5000
    warmup: int = 2500
    thin: int = 1
    init_step_sizes: float | list[float] = 0.1
    target_accept: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1:
            raise ValueError("iterations and thin must be positive")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must satisfy 0 <= warmup < iterations")
        if self.target_accept is not None and not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        steps = np.atleast_1d(np.asarray(self.init_step_sizes, dtype=float))
        if np.any(steps <= 0):
            raise ValueError("init_step_sizes must be positive")


@dataclass
class Chain:
    names: list[str]
    draws: np.ndarray                 # T x K on the constrained scale
    accept_rate: dict[str, float]
    wall_time: float
    seed: int = 0
    config: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def parameter_vectors(self, dataset: Dataset, config: ModelConfig):
        n_b = dataset.n_customer_features
        n_l = dataset.n_store_features if config.feature_driven else 0
        for row in self.draws:
            yield ParameterVector(
                row[:n_b], row[n_b:n_b + n_l], row[n_b + n_l:-2], row[-2], row[-1]
            )

    def save(self, csv_path: str | Path, sidecar_path: str | Path) -> None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.names)
            for row in self.draws:
                writer.writerow([repr(float(v)) for v in row])
        meta = {
            "schema_version": SCHEMA_VERSION,
            "method": "mcmc",
            "accept_rate": self.accept_rate,
            "seed": self.seed,
            "wall_time": self.wall_time,
            "config": self.config,
        }
        Path(sidecar_path).write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, csv_path: str | Path, sidecar_path: str | Path) -> "Chain":
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        meta = json.loads(Path(sidecar_path).read_text())
        draws = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
        return cls(rows[0], draws, meta["accept_rate"], meta["wall_time"], meta.get("seed", 0), meta.get("config", {}))


def parameter_names(dataset: Dataset, config: ModelConfig) -> list[str]:
    names = [f"beta_{i + 1}" for i in range(dataset.n_customer_features)]
    if config.feature_driven:
        names += [f"lambda_{i + 1}" for i in range(dataset.n_store_features)]
    names += [f"epsilon_{i + 1}" for i in range(dataset.n_stores)]
    return names + ["gamma", "alpha"]


class LogPosterior:
    """Unnormalized log posterior on unconstrained coordinates (with log-Jacobian)."""

    def __init__(self, dataset: Dataset, config: ModelConfig, priors: PriorSpec):
        self.dataset, self.config, self.priors = dataset, config, priors
        self.fm = ForwardModel(dataset, config)
        self.n_beta = dataset.n_customer_features
        self.n_lambda = dataset.n_store_features if config.feature_driven else 0
        self.n_stores = dataset.n_stores
        self.dim = self.n_beta + self.n_lambda + self.n_stores + 2
        b, l = self.n_beta, self.n_lambda
        self.blocks = {
            "beta": np.arange(0, b),
            "lambda": np.arange(b, b + l),
            "epsilon": np.arange(b + l, b + l + self.n_stores),
            "precision": np.arange(self.dim - 2, self.dim),
        }
        if not l:
            del self.blocks["lambda"]
        pr = priors
        self._gamma_norm = pr.gamma_shape * math.log(pr.gamma_rate) - lgamma(pr.gamma_shape)
        self._alpha_norm = pr.alpha_shape * math.log(pr.alpha_rate) - lgamma(pr.alpha_shape)

    def split(self, u: np.ndarray):
        b, l = self.n_beta, self.n_lambda
        return u[:b], u[b:b + l], u[b + l:b + l + self.n_stores], u[-2], u[-1]

    def constrain(self, u: np.ndarray) -> np.ndarray:
        out = np.array(u, dtype=float)
        out[-2:] = np.exp(out[-2:])
        return out

    def to_parameters(self, u: np.ndarray) -> ParameterVector:
        beta, lam, eps, lg, la = self.split(u)
        return ParameterVector(beta, lam, eps, math.exp(lg), math.exp(la))

    def __call__(self, u: np.ndarray) -> float:
        pr, fm = self.priors, self.fm
        beta, lam, eps, log_g, log_a = self.split(np.asarray(u, dtype=float))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            gamma, alpha = math.exp(min(log_g, 700.0)), math.exp(min(log_a, 700.0))
            if not (gamma > 0 and alpha > 0 and math.isfinite(gamma) and math.isfinite(alpha)):
                return -math.inf
            yhat = fm.revenues(beta, fm.upsilon(lam, eps))
            resid = fm.y - yhat
            S, B = self.n_stores, self.n_beta
            lp = 0.5 * S * (log_g - LOG_2PI) - 0.5 * gamma * float(resid @ resid)
            dev = beta - pr.mu_beta
            lp += 0.5 * B * (log_a - LOG_2PI) - 0.5 * alpha * float(dev @ dev)
            lp += self._alpha_norm + (pr.alpha_shape - 1.0) * log_a - pr.alpha_rate * alpha
            lp += self._gamma_norm + (pr.gamma_shape - 1.0) * log_g - pr.gamma_rate * gamma
            if self.n_lambda:
                dl = lam - pr.mu_lambda
                lp += -0.5 * self.n_lambda * (LOG_2PI + math.log(pr.var_lambda)) - 0.5 * float(dl @ dl) / pr.var_lambda
            de = eps - pr.mu_epsilon
            lp += -0.5 * S * (LOG_2PI + math.log(pr.var_epsilon)) - 0.5 * float(de @ de) / pr.var_epsilon
            lp += log_g + log_a
        return lp if math.isfinite(lp) else -math.inf


def log_posterior_unconstrained(dataset: Dataset, config: ModelConfig, priors: PriorSpec, u) -> float:
    return LogPosterior(dataset, config, priors)(np.asarray(u, dtype=float))


def reference_log_posterior(dataset, config, priors, u) -> float:
    """Same target assembled from :func:`bsim.model.log_joint` (slow, for checking)."""
    lp = LogPosterior(dataset, config, priors)
    return log_joint(dataset, config, lp.to_parameters(u), priors) + u[-2] + u[-1]


def _default_target(block: str, size: int) -> float:
    # 0.44 for scalar blocks and the (log gamma, log alpha) pair, 0.25 otherwise
    return 0.44 if size == 1 or block == "precision" else 0.25


def run_rwm(
    log_density: Callable[[np.ndarray], float],
    x0: np.ndarray,
    blocks: dict[str, np.ndarray],
    cfg: MCMCConfig,
) -> tuple[np.ndarray, dict[str, float]]:
    """Generic blockwise adaptive RWM. Returns (kept draws on the input scale, post-warm-up acceptance)."""
    rng = np.random.default_rng(cfg.seed)
    x = np.array(x0, dtype=float)
    lp = log_density(x)
    if not math.isfinite(lp):
        raise MCMCError("initial point has non-finite log density")
    steps = np.atleast_1d(np.asarray(cfg.init_step_sizes, dtype=float))
    names = list(blocks)
    log_scale, chol, target = {}, {}, {}
    # scalar, one per block, or one per coordinate
    if steps.size == 1:
        per_coord = np.full(x.size, steps[0])
    elif steps.size == x.size:
        per_coord = steps
    elif steps.size == len(names):
        per_coord = np.empty(x.size)
        for s, name in zip(steps, names):
            per_coord[blocks[name]] = s
    else:
        raise MCMCError(f"init_step_sizes has {steps.size} entries; expected 1, {len(names)} or {x.size}")
    for name in names:
        idx = blocks[name]
        chol[name] = np.diag(per_coord[idx])
        log_scale[name] = 0.0
        target[name] = cfg.target_accept if cfg.target_accept is not None else _default_target(name, idx.size)

    n_keep = (cfg.iterations - cfg.warmup + cfg.thin - 1) // cfg.thin
    kept = np.empty((n_keep, x.size))
    accepted = {n: 0 for n in names}
    late_warm = {n: [0, 0] for n in names}
    warm_hist: list[np.ndarray] = []
    refresh_every = max(50, cfg.warmup // 10)
    k = 0

    for it in range(cfg.iterations):
        warming = it < cfg.warmup
        for name in names:
            idx = blocks[name]
            prop = x.copy()
            prop[idx] += math.exp(log_scale[name]) * (chol[name] @ rng.standard_normal(idx.size))
            lp_prop = log_density(prop)
            acc_prob = math.exp(min(0.0, lp_prop - lp)) if math.isfinite(lp_prop) else 0.0
            ok = rng.uniform() < acc_prob
            if ok:
                x, lp = prop, lp_prop
            if warming:
                log_scale[name] += (acc_prob - target[name]) / (it + 1) ** 0.6
                if it >= cfg.warmup // 2:
                    late_warm[name][0] += ok
                    late_warm[name][1] += 1
            else:
                accepted[name] += ok
        if warming:
            warm_hist.append(x.copy())
            if it + 1 >= 2 * refresh_every and (it + 1) % refresh_every == 0 and it + 1 < cfg.warmup:
                recent = np.array(warm_hist[len(warm_hist) // 2:])
                for name in names:
                    idx = blocks[name]
                    d = idx.size
                    cov = np.atleast_2d(np.cov(recent[:, idx], rowvar=False))
                    cov = cov * 2.38 ** 2 / d + 1e-10 * np.eye(d)
                    try:
                        chol[name] = np.linalg.cholesky(cov)
                        log_scale[name] = 0.0
                    except np.linalg.LinAlgError:
                        pass
            if it + 1 == cfg.warmup:
                for name in names:
                    n_ok, n_tot = late_warm[name]
                    # too few late warm-up proposals to call a block stuck
                    if n_tot >= MIN_STUCK_EVIDENCE and n_ok / n_tot < 0.01:
                        raise MCMCError(
                            f"block '{name}' accepted {n_ok}/{n_tot} proposals in late warm-up; "
                            "try smaller init_step_sizes"
                        )
        elif (it - cfg.warmup) % cfg.thin == 0:
            kept[k] = x
            k += 1

    n_post = cfg.iterations - cfg.warmup
    return kept[:k], {n: accepted[n] / n_post for n in names}


def initial_point(lp: LogPosterior) -> np.ndarray:
    pr = lp.priors
    u = np.zeros(lp.dim)
    b, l = lp.n_beta, lp.n_lambda
    u[:b] = pr.mu_beta
    u[b:b + l] = pr.mu_lambda
    u[b + l:b + l + lp.n_stores] = pr.mu_epsilon
    u[-2] = math.log(pr.gamma_shape / pr.gamma_rate)
    u[-1] = math.log(pr.alpha_shape / pr.alpha_rate)
    return u


def run_chain(
    dataset: Dataset,
    config: ModelConfig,
    priors: PriorSpec,
    mcmc_config: MCMCConfig | None = None,
    init: np.ndarray | None = None,
) -> Chain:
    cfg = mcmc_config or MCMCConfig()
    target = LogPosterior(dataset, config, priors)
    start = time.perf_counter()
    x0 = initial_point(target) if init is None else np.asarray(init, dtype=float)
    kept, accept = run_rwm(target, x0, target.blocks, cfg)
    wall = time.perf_counter() - start
    draws = kept.copy()
    draws[:, -2:] = np.exp(draws[:, -2:])
    log.info("MCMC finished in %.2fs, acceptance %s", wall, accept)
    cfg_dict = dict(cfg.__dict__)
    cfg_dict["init_step_sizes"] = np.atleast_1d(cfg.init_step_sizes).tolist()
    return Chain(parameter_names(dataset, config), draws, accept, wall, cfg.seed, cfg_dict)


# ---------------------------------------------------------------------------
# summaries


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    f = np.fft.rfft(x, n=2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    return acov / acov[0]


def effective_sample_size(x: np.ndarray) -> float:
    """ESS with Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0.0:
        return float(n)
    rho = autocorrelation(x)
    pair_sums = []
    prev = math.inf
    for k in range(0, n - 1, 2):
        g = rho[k] + rho[k + 1]
        if g <= 0:
            break
        g = min(g, prev)
        pair_sums.append(g)
        prev = g
    tau = -1.0 + 2.0 * sum(pair_sums)
    # antithetic chains can give tau <= 0; cap ESS at n log10(n)
    return float(n / max(tau, 1.0 / math.log10(n)))


def chain_summary(chain: Chain, level: float = 0.95) -> dict[str, dict]:
    T = chain.draws.shape[0]
    if T == 0:
        raise MCMCError("empty chain")
    if T < 10:
        raise MCMCError(f"chain too short for a summary ({T} draws, need >= 10)")
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    out = {}
    for j, name in enumerate(chain.names):
        col = chain.draws[:, j]
        out[name] = {
            "mean": float(np.mean(col)),
            "std": float(np.std(col, ddof=1)),
            "ci": [float(np.quantile(col, lo_q)), float(np.quantile(col, hi_q))],
            "ess": effective_sample_size(col),
        }
    return out
