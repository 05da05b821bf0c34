"""Mean-field variational inference.

Only the expected residual sum of squares needs Monte Carlo: lambda and
epsilon are reparameterized as ``mean + sqrt(var) * z``, beta (which enters
the revenues linearly) is integrated out exactly per draw, and every
expectation involving the Gamma factors on alpha and gamma is closed form. Optimization runs on unconstrained
coordinates: means as-is, log-variances, log-shapes and log-rates.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import (
    GammaDist,
    GaussianDiag,
    LOG_2PI,
    digamma,
    gaussian_quantile,
    empirical_quantile,
    kl_gamma,
    kl_gaussian,
    trigamma,
)
from .model import Dataset, ForwardModel, ModelConfig, PriorSpec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class VIError(RuntimeError):
    def __init__(self, message: str, elbo_trace=None):
        super().__init__(message)
        self.elbo_trace = list(elbo_trace or [])


@dataclass
class VariationalState:
    q_beta: GaussianDiag
    q_alpha: GammaDist
    q_gamma: GammaDist
    q_lambda: GaussianDiag | None
    q_epsilon: GaussianDiag

    @property
    def n_beta(self) -> int:
        return self.q_beta.dim

    @property
    def n_lambda(self) -> int:
        return 0 if self.q_lambda is None else self.q_lambda.dim

    @property
    def n_stores(self) -> int:
        return self.q_epsilon.dim

    @classmethod
    def initial(cls, priors: PriorSpec, init_variance: float = 0.1) -> "VariationalState":
        def gauss(mean):
            return GaussianDiag(mean.copy(), np.full(mean.shape, init_variance))

        return cls(
            q_beta=gauss(priors.mu_beta),
            q_alpha=priors.alpha_prior,
            q_gamma=priors.gamma_prior,
            q_lambda=gauss(priors.mu_lambda) if priors.mu_lambda.size else None,
            q_epsilon=gauss(priors.mu_epsilon),
        )

    # unconstrained layout:
    # [mu_b, logv_b, log a_alpha, log b_alpha, log a_gamma, log b_gamma, mu_l, logv_l, mu_e, logv_e]
    def to_unconstrained(self) -> np.ndarray:
        parts = [self.q_beta.mean, np.log(self.q_beta.variance)]
        parts.append(np.log([self.q_alpha.shape, self.q_alpha.rate, self.q_gamma.shape, self.q_gamma.rate]))
        if self.q_lambda is not None:
            parts += [self.q_lambda.mean, np.log(self.q_lambda.variance)]
        parts += [self.q_epsilon.mean, np.log(self.q_epsilon.variance)]
        return np.concatenate(parts)

    @classmethod
    def from_unconstrained(cls, u: np.ndarray, n_beta: int, n_lambda: int, n_stores: int) -> "VariationalState":
        sl = Layout(n_beta, n_lambda, n_stores)
        a = np.exp(u[sl.gam])
        return cls(
            q_beta=GaussianDiag(u[sl.mu_b], np.exp(u[sl.lv_b])),
            q_alpha=GammaDist(a[0], a[1]),
            q_gamma=GammaDist(a[2], a[3]),
            q_lambda=GaussianDiag(u[sl.mu_l], np.exp(u[sl.lv_l])) if n_lambda else None,
            q_epsilon=GaussianDiag(u[sl.mu_e], np.exp(u[sl.lv_e])),
        )

    def to_dict(self) -> dict:
        out = {
            "q_beta": {"mean": self.q_beta.mean.tolist(), "variance": self.q_beta.variance.tolist()},
            "q_alpha": {"shape": self.q_alpha.shape, "rate": self.q_alpha.rate},
            "q_gamma": {"shape": self.q_gamma.shape, "rate": self.q_gamma.rate},
            "q_epsilon": {"mean": self.q_epsilon.mean.tolist(), "variance": self.q_epsilon.variance.tolist()},
        }
        if self.q_lambda is not None:
            out["q_lambda"] = {"mean": self.q_lambda.mean.tolist(), "variance": self.q_lambda.variance.tolist()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalState":
        lam = d.get("q_lambda")
        return cls(
            q_beta=GaussianDiag(d["q_beta"]["mean"], d["q_beta"]["variance"]),
            q_alpha=GammaDist(d["q_alpha"]["shape"], d["q_alpha"]["rate"]),
            q_gamma=GammaDist(d["q_gamma"]["shape"], d["q_gamma"]["rate"]),
            q_lambda=GaussianDiag(lam["mean"], lam["variance"]) if lam else None,
            q_epsilon=GaussianDiag(d["q_epsilon"]["mean"], d["q_epsilon"]["variance"]),
        )


class Layout:
    """Index slices into the unconstrained variational vector."""

    def __init__(self, n_beta: int, n_lambda: int, n_stores: int):
        B, L, S = n_beta, n_lambda, n_stores
        self.mu_b = slice(0, B)
        self.lv_b = slice(B, 2 * B)
        self.gam = slice(2 * B, 2 * B + 4)
        o = 2 * B + 4
        self.mu_l = slice(o, o + L)
        self.lv_l = slice(o + L, o + 2 * L)
        o += 2 * L
        self.mu_e = slice(o, o + S)
        self.lv_e = slice(o + S, o + 2 * S)
        self.size = o + 2 * S
        self.names = (
            [f"mu_beta_{i + 1}" for i in range(B)] + [f"logvar_beta_{i + 1}" for i in range(B)]
            + ["log_shape_alpha", "log_rate_alpha", "log_shape_gamma", "log_rate_gamma"]
            + [f"mu_lambda_{i + 1}" for i in range(L)] + [f"logvar_lambda_{i + 1}" for i in range(L)]
            + [f"mu_epsilon_{i + 1}" for i in range(S)] + [f"logvar_epsilon_{i + 1}" for i in range(S)]
        )


@dataclass
class Noise:
    """Standard-normal draws for (lambda, epsilon), shared by value and gradient."""

    lambda_: np.ndarray
    epsilon: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, k: int, n_lambda: int, n_stores: int) -> "Noise":
        z = rng.standard_normal((k, n_lambda + n_stores))
        return cls(z[:, :n_lambda], z[:, n_lambda:])


class ELBO:
    """ELBO and its gradient for one dataset/config/prior triple."""

    def __init__(self, dataset: Dataset, config: ModelConfig, priors: PriorSpec):
        self.fm = ForwardModel(dataset, config)
        self.priors = priors
        self.n_beta = dataset.n_customer_features
        self.n_lambda = dataset.n_store_features if config.feature_driven else 0
        self.n_stores = dataset.n_stores
        self.layout = Layout(self.n_beta, self.n_lambda, self.n_stores)
        self.half_dt2 = 0.5 * config.truncation_radius ** 2

    def draw_noise(self, rng: np.random.Generator, k: int) -> Noise:
        return Noise.draw(rng, k, self.n_lambda, self.n_stores)

    def _residual_ss(self, u: np.ndarray, noise: Noise, want_grad: bool):
        """Expected residual sum of squares and its gradient.

        beta enters the revenues linearly, so its expectation is taken in
        closed form given each (lambda, epsilon) draw:
        E_beta ||y - A mu||^2 + sum_sj A_sj^2 v_j, with A = P^T V.
        """
        sl, fm = self.layout, self.fm
        mu_b, v_b = u[sl.mu_b], np.exp(u[sl.lv_b])
        sd_e = np.exp(0.5 * u[sl.lv_e])
        eps = u[sl.mu_e] + sd_e * noise.epsilon
        if self.n_lambda:
            sd_l = np.exp(0.5 * u[sl.lv_l])
            lam = u[sl.mu_l] + sd_l * noise.lambda_
            ups = lam @ fm.phi.T + eps
        else:
            ups = eps
        p = fm.probabilities_sn(ups)                      # K,S,N
        A = p @ fm.V                                      # K,S,B
        e = fm.y - A @ mu_b                               # K,S
        k = e.shape[0]
        A2 = A * A
        rss = (float(np.sum(e * e)) + float(np.sum(A2 @ v_b))) / k
        if not want_grad:
            return rss, None

        grad = np.zeros(sl.size)
        grad[sl.mu_b] = -2.0 / k * np.einsum("ksj,ks->j", A, e)
        grad[sl.lv_b] = v_b * A2.sum(axis=(0, 1)) / k
        dA = (2.0 / k) * (A * v_b - e[:, :, None] * mu_b)  # K,S,B
        G = dA @ fm.V.T                                     # K,S,N : d rss / d p
        G -= np.sum(p * G, axis=1, keepdims=True)
        w = p * G                                           # d rss / d log Z
        var = np.exp(ups)
        c = self.half_dt2 / var
        h = c * np.exp(-c) / -np.expm1(-c)          # c / (e^c - 1), overflow-safe
        d_ups = np.sum(w * fm.d2_sn, axis=2) * (0.5 / var) + (h - 1.0) * w.sum(axis=2)

        grad[sl.mu_e] = d_ups.sum(axis=0)
        grad[sl.lv_e] = 0.5 * sd_e * np.sum(d_ups * noise.epsilon, axis=0)
        if self.n_lambda:
            d_lam = d_ups @ fm.phi
            grad[sl.mu_l] = d_lam.sum(axis=0)
            grad[sl.lv_l] = 0.5 * sd_l * np.sum(d_lam * noise.lambda_, axis=0)
        return rss, grad

    def terms(self, u: np.ndarray, noise: Noise, want_grad: bool = True):
        """Return (elbo, grad, parts); ``grad`` is w.r.t. the unconstrained vector."""
        sl, pr = self.layout, self.priors
        S, B = self.n_stores, self.n_beta
        a_al, b_al, a_ga, b_ga = np.exp(u[sl.gam])

        rss, g_rss = self._residual_ss(u, noise, want_grad)
        e_gamma = a_ga / b_ga
        ell = -0.5 * S * LOG_2PI + 0.5 * S * (digamma(a_ga) - math.log(b_ga)) - 0.5 * e_gamma * rss

        mu_b, v_b = u[sl.mu_b], np.exp(u[sl.lv_b])
        dev = mu_b - pr.mu_beta
        quad = float(dev @ dev + v_b.sum())
        e_log_p_beta = -0.5 * B * LOG_2PI + 0.5 * B * (digamma(a_al) - math.log(b_al)) - 0.5 * a_al / b_al * quad
        e_log_q_beta = -0.5 * float(np.sum(LOG_2PI + 1.0 + u[sl.lv_b]))

        q_eps = GaussianDiag(u[sl.mu_e], np.exp(u[sl.lv_e]))
        kl_eps = kl_gaussian(q_eps, pr.epsilon_prior)
        kl_lam = 0.0
        if self.n_lambda:
            kl_lam = kl_gaussian(GaussianDiag(u[sl.mu_l], np.exp(u[sl.lv_l])), pr.lambda_prior)
        kl_ga = kl_gamma(GammaDist(a_ga, b_ga), pr.gamma_prior)
        kl_al = kl_gamma(GammaDist(a_al, b_al), pr.alpha_prior)
        kl = kl_lam + kl_eps + kl_ga + kl_al - e_log_p_beta + e_log_q_beta
        parts = {
            "expected_loglik": ell,
            "kl_lambda": kl_lam,
            "kl_epsilon": kl_eps,
            "kl_gamma": kl_ga,
            "kl_alpha": kl_al,
            "beta_prior_cross": -e_log_p_beta + e_log_q_beta,
            "residual_ss": rss,
        }
        value = ell - kl
        if not math.isfinite(value):
            bad = [k for k, v in parts.items() if not math.isfinite(v)]
            raise VIError(f"non-finite ELBO; offending terms: {bad or ['sum']}")
        if not want_grad:
            return value, None, parts

        grad = -0.5 * e_gamma * g_rss
        grad[sl.mu_b] += -(a_al / b_al) * dev
        grad[sl.lv_b] += -0.5 * (a_al / b_al) * v_b + 0.5
        if self.n_lambda:
            v_l = np.exp(u[sl.lv_l])
            grad[sl.mu_l] += -(u[sl.mu_l] - pr.mu_lambda) / pr.var_lambda
            grad[sl.lv_l] += -0.5 * (v_l / pr.var_lambda - 1.0)
        v_e = np.exp(u[sl.lv_e])
        grad[sl.mu_e] += -(u[sl.mu_e] - pr.mu_epsilon) / pr.var_epsilon
        grad[sl.lv_e] += -0.5 * (v_e / pr.var_epsilon - 1.0)

        ap, bp = pr.gamma_shape, pr.gamma_rate
        tg = trigamma(a_ga)
        d_a = 0.5 * S * tg - 0.5 * rss / b_ga - ((a_ga - ap) * tg + bp / b_ga - 1.0)
        d_b = -0.5 * S / b_ga + 0.5 * a_ga * rss / b_ga ** 2 - (ap / b_ga - a_ga * bp / b_ga ** 2)
        ap, bp = pr.alpha_shape, pr.alpha_rate
        ta = trigamma(a_al)
        d_aa = 0.5 * B * ta - 0.5 * quad / b_al - ((a_al - ap) * ta + bp / b_al - 1.0)
        d_ba = -0.5 * B / b_al + 0.5 * a_al * quad / b_al ** 2 - (ap / b_al - a_al * bp / b_al ** 2)
        grad[sl.gam] += np.array([d_aa * a_al, d_ba * b_al, d_a * a_ga, d_b * b_ga])

        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise VIError(f"non-finite ELBO gradient at {self.layout.names[bad[0]]}")
        return value, grad, parts


def elbo_estimate(dataset, config, priors, state: VariationalState, mc_samples: int, rng) -> float:
    obj = ELBO(dataset, config, priors)
    value, _, _ = obj.terms(state.to_unconstrained(), obj.draw_noise(rng, mc_samples), want_grad=False)
    return value


def elbo_gradient(dataset, config, priors, state: VariationalState, mc_samples: int, rng) -> np.ndarray:
    obj = ELBO(dataset, config, priors)
    _, grad, _ = obj.terms(state.to_unconstrained(), obj.draw_noise(rng, mc_samples))
    return grad


@dataclass
class VIConfig:
    mc_samples: int = 4
    max_iters: int = 20_000
    learning_rate: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    convergence_window: int = 200
    convergence_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 1 or self.max_iters < 1 or self.convergence_window < 1:
            raise ValueError("mc_samples, max_iters and convergence_window must be positive")
        if not self.learning_rate > 0 or not self.convergence_tol > 0:
            raise ValueError("learning_rate and convergence_tol must be positive")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("adam_betas must lie in (0, 1)")
        self.adam_betas = (float(b1), float(b2))


@dataclass
class FitResult:
    state: VariationalState
    elbo_trace: list[float]
    wall_time: float
    iterations_run: int
    converged: bool
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "method": "vi",
            "state": self.state.to_dict(),
            "elbo_trace": self.elbo_trace,
            "wall_time": self.wall_time,
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "seed": self.seed,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            state=VariationalState.from_dict(d["state"]),
            elbo_trace=list(d["elbo_trace"]),
            wall_time=d["wall_time"],
            iterations_run=d["iterations_run"],
            converged=d["converged"],
            seed=d.get("seed", 0),
            config=d.get("config", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def fit_vi(
    dataset: Dataset,
    config: ModelConfig,
    priors: PriorSpec,
    vi_config: VIConfig | None = None,
    init: VariationalState | None = None,
) -> FitResult:
    """Adam ascent on the ELBO.

    Convergence: the mean ELBO over the latest window must improve on the
    previous window's mean by less than ``convergence_tol`` relative to its
    magnitude. The returned state averages the unconstrained iterates over
    the final window.
    """
    cfg = vi_config or VIConfig()
    obj = ELBO(dataset, config, priors)
    rng = np.random.default_rng(cfg.seed)
    u = (init or VariationalState.initial(priors)).to_unconstrained()
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    b1, b2 = cfg.adam_betas
    w = cfg.convergence_window
    trace: list[float] = []
    recent = np.zeros((w, u.size))
    converged = False
    start = time.perf_counter()

    it = 0
    for it in range(1, cfg.max_iters + 1):
        try:
            value, grad, _ = obj.terms(u, obj.draw_noise(rng, cfg.mc_samples))
        except VIError as exc:
            raise VIError(f"VI diverged at iteration {it}: {exc}", trace) from exc
        trace.append(value)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1 ** it)
        v_hat = v / (1 - b2 ** it)
        u = u + cfg.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)
        recent[(it - 1) % w] = u
        if it >= 2 * w and it % w == 0:
            new = float(np.mean(trace[-w:]))
            old = float(np.mean(trace[-2 * w:-w]))
            if new - old < cfg.convergence_tol * max(1.0, abs(old)):
                converged = True
                break

    u_final = recent.mean(axis=0) if it >= w else u
    state = VariationalState.from_unconstrained(u_final, obj.n_beta, obj.n_lambda, obj.n_stores)
    wall = time.perf_counter() - start
    log.info("VI finished after %d iterations (converged=%s) in %.2fs", it, converged, wall)
    return FitResult(
        state=state,
        elbo_trace=trace,
        wall_time=wall,
        iterations_run=it,
        converged=converged,
        seed=cfg.seed,
        config={**cfg.__dict__, "adam_betas": list(cfg.adam_betas)},
    )


def summarize(state: VariationalState, level: float = 0.95, n_draws: int = 100_000, seed: int = 0) -> dict:
    """Per-parameter mean, std and equal-tailed credible interval."""
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    out: dict[str, dict] = {}

    def gauss_block(name: str, q: GaussianDiag | None):
        if q is None:
            return
        for i in range(q.dim):
            marginal = GaussianDiag(q.mean[i:i + 1], q.variance[i:i + 1])
            out[f"{name}_{i + 1}"] = {
                "mean": float(q.mean[i]),
                "std": float(q.std[i]),
                "ci": [gaussian_quantile(marginal, lo_q), gaussian_quantile(marginal, hi_q)],
            }

    gauss_block("beta", state.q_beta)
    gauss_block("lambda", state.q_lambda)
    gauss_block("epsilon", state.q_epsilon)
    rng = np.random.default_rng(seed)
    for name, q in (("gamma", state.q_gamma), ("alpha", state.q_alpha)):
        draws = rng.gamma(q.shape, 1.0 / q.rate, size=n_draws)
        out[name] = {
            "mean": q.mean,
            "std": q.std,
            "ci": [empirical_quantile(draws, lo_q), empirical_quantile(draws, hi_q)],
        }
    return out
