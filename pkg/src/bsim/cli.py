"""Command-line interface.

Every command reads a JSON config (with ``BSIM_*`` environment overrides),
writes its outputs into a directory, and embeds the resolved config and seed
in each JSON file it writes. Wall-clock timings go to ``timing.json`` only,
so every other output is byte-identical when a command is rerun.

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import io
from .huff import DEFAULT_DECAYS, DEFAULT_EXPONENTS, HuffError, fit_huff
from .mcmc import Chain, MCMCConfig, MCMCError, chain_summary, parameter_names, run_chain
from .metrics import MetricError, nrmse, r_squared
from .model import (
    AttractionMode,
    Dataset,
    EdgeCorrection,
    ForwardModel,
    ModelConfig,
    ModelError,
    PreprocessReport,
    PriorSpec,
    apply_feature_scaling,
    preprocess,
)
from .synthetic import SimSpec, StudyError, generate_dataset, run_study
from .vi import VIConfig, VIError, VariationalState, fit_vi, summarize

log = logging.getLogger("bsim")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
ENV_PREFIX = "BSIM_"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config loading


def apply_env_overrides(cfg: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Apply ``BSIM_A__B=value`` as ``cfg["a"]["b"] = value``.

    Values are parsed as JSON when possible and kept as strings otherwise.
    """
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(cfg))
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX) or len(key) == len(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        raw = environ[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[path[-1]] = value
    return out


def load_json_config(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return apply_env_overrides(data)


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config field '{name}' must be an object")
    return dict(value)


def _build(cls, fields: dict, label: str):
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(fields) - known)
    if unknown:
        raise ConfigError(f"unknown {label} field(s): {unknown}")
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {label} config: {exc}") from None


@dataclass
class RunConfig:
    stores: str
    customers: str
    region: str | None
    model: ModelConfig
    priors: dict
    preprocess: dict
    method: str
    vi: VIConfig
    mcmc: MCMCConfig
    seed: int
    output_dir: str | None = None
    summary_level: float = 0.95

    @property
    def edge(self) -> EdgeCorrection | None:
        e = self.preprocess.get("edge")
        return None if e is None else EdgeCorrection(**e)

    def to_dict(self) -> dict:
        return {
            "stores": self.stores,
            "customers": self.customers,
            "region": self.region,
            "model": {
                "truncation_radius": self.model.truncation_radius,
                "attraction_mode": self.model.attraction_mode.value,
            },
            "priors": self.priors,
            "preprocess": self.preprocess,
            "method": self.method,
            "vi": {**asdict(self.vi), "adam_betas": list(self.vi.adam_betas)},
            "mcmc": {**asdict(self.mcmc), "init_step_sizes": np.atleast_1d(self.mcmc.init_step_sizes).tolist()},
            "seed": self.seed,
            "output_dir": self.output_dir,
            "summary_level": self.summary_level,
        }


PREPROCESS_DEFAULTS = {
    "log_revenue": False,
    "standardize_stores": True,
    "standardize_customers": True,
    "edge": None,
}


def resolve_run_config(raw: dict, base_dir: str | Path = ".", method: str | None = None) -> RunConfig:
    """Validate a run config, fill defaults and resolve paths against ``base_dir``."""
    base = Path(base_dir)
    known = {"stores", "customers", "region", "model", "priors", "preprocess", "method", "vi", "mcmc",
             "seed", "output_dir", "summary_level"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {unknown}")

    def path_field(name: str, required: bool) -> str | None:
        value = raw.get(name)
        if value is None:
            if required:
                raise ConfigError(f"config field '{name}' is required")
            return None
        p = Path(value)
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigError(f"config field '{name}': file not found: {p}")
        return str(p.resolve())

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("config field 'seed' must be an integer")

    model_raw = _section(raw, "model")
    if "truncation_radius" not in model_raw:
        raise ConfigError("config field 'model.truncation_radius' is required")
    try:
        model = ModelConfig(float(model_raw["truncation_radius"]),
                            AttractionMode(model_raw.get("attraction_mode", "feature_driven")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from None
    extra_model = sorted(set(model_raw) - {"truncation_radius", "attraction_mode"})
    if extra_model:
        raise ConfigError(f"unknown model field(s): {extra_model}")

    pre = {**PREPROCESS_DEFAULTS, **_section(raw, "preprocess")}
    unknown = sorted(set(pre) - set(PREPROCESS_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown preprocess field(s): {unknown}")
    if pre["edge"] is not None:
        edge = {"seed": seed, **pre["edge"]}
        pre["edge"] = asdict(_build(EdgeCorrection, edge, "preprocess.edge"))

    method = method or raw.get("method", "vi")
    if method not in ("vi", "mcmc"):
        raise ConfigError(f"config field 'method' must be 'vi' or 'mcmc', got {method!r}")
    vi = _build(VIConfig, {"seed": seed, **_section(raw, "vi")}, "vi")
    mcmc = _build(MCMCConfig, {"seed": seed, **_section(raw, "mcmc")}, "mcmc")

    level = raw.get("summary_level", 0.95)
    if not (isinstance(level, (int, float)) and 0 < level < 1):
        raise ConfigError("config field 'summary_level' must lie in (0, 1)")

    return RunConfig(
        stores=path_field("stores", True),
        customers=path_field("customers", True),
        region=path_field("region", False),
        model=model,
        priors=_section(raw, "priors"),
        preprocess=pre,
        method=method,
        vi=vi,
        mcmc=mcmc,
        seed=seed,
        output_dir=raw.get("output_dir"),
        summary_level=float(level),
    )


def load_run_config(path: str | Path, method: str | None = None) -> RunConfig:
    raw = load_json_config(path)
    return resolve_run_config(raw, Path(path).parent, method)


def build_priors(dataset: Dataset, model: ModelConfig, overrides: dict) -> PriorSpec:
    lengths = {
        "mu_beta": dataset.n_customer_features,
        "mu_lambda": dataset.n_store_features if model.feature_driven else 0,
        "mu_epsilon": dataset.n_stores,
    }
    fields = {}
    for key, value in overrides.items():
        if key not in PriorSpec.__dataclass_fields__:
            raise ConfigError(f"unknown priors field '{key}'")
        if key in lengths:
            arr = np.broadcast_to(np.asarray(value, dtype=float), (lengths[key],)) \
                if np.ndim(value) == 0 else np.asarray(value, dtype=float)
            if arr.shape != (lengths[key],):
                raise ConfigError(f"priors field '{key}' needs length {lengths[key]}, got {arr.shape[0]}")
            value = arr
        fields[key] = value
    try:
        return PriorSpec.default(dataset, model, **fields)
    except (ModelError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid priors: {exc}") from None


def prepare_dataset(cfg: RunConfig) -> tuple[Dataset, PreprocessReport]:
    try:
        raw = io.load_dataset(cfg.stores, cfg.customers, cfg.region)
    except io.DataFormatError as exc:
        raise ConfigError(str(exc)) from None
    pre = cfg.preprocess
    return preprocess(
        raw, cfg.model, cfg.edge, pre["log_revenue"], pre["standardize_stores"], pre["standardize_customers"]
    )


def _out_dir(arg: str | None, cfg: RunConfig | None = None) -> Path:
    target = arg or (cfg.output_dir if cfg else None)
    if not target:
        raise ConfigError("no output directory: pass --out or set 'output_dir' in the config")
    path = Path(target)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory not writable: {path}")
    return path


def _header(command: str, config: Any, seed: int | None) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "config": config, "seed": seed}


def _write_timing(out: Path, timing: dict) -> None:
    io.dump_json({"schema_version": SCHEMA_VERSION, **timing}, out / "timing.json")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    raw = load_json_config(args.spec) if args.spec else apply_env_overrides({})
    try:
        spec = SimSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args.out)
    dataset, truth = generate_dataset(spec, args.replicate)
    io.write_stores(dataset, out / "stores.csv")
    io.write_customers(dataset, out / "customers.csv")
    d = spec.domain
    io.dump_json([[0.0, 0.0], [d, 0.0], [d, d], [0.0, d]], out / "region.json")
    header = _header("simulate", {"spec": spec.to_dict(), "replicate": args.replicate}, spec.seed)
    io.dump_json({**header, "truth": truth.to_dict()}, out / "truth.json")
    # a ready-to-run fit config for the files above; features stay on the generating scale
    io.dump_json({
        "stores": "stores.csv",
        "customers": "customers.csv",
        "region": "region.json",
        "model": {"truncation_radius": spec.truncation_radius, "attraction_mode": "feature_driven"},
        "preprocess": {"standardize_stores": False, "standardize_customers": False},
        "seed": spec.seed,
    }, out / "run.json")
    log.info("wrote %d stores and %d customers to %s", dataset.n_stores, dataset.n_customers, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args) -> int:
    cfg = load_run_config(args.config)
    out = _out_dir(args.out, cfg)
    dataset, report = prepare_dataset(cfg)
    io.write_stores(dataset, out / "stores.csv")
    io.write_customers(dataset, out / "customers.csv")
    io.dump_json({**_header("preprocess", cfg.to_dict(), cfg.seed), "report": report.to_dict()},
                 out / "preprocess.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    cfg = load_run_config(args.config, args.method)
    out = _out_dir(args.out, cfg)
    dataset, report = prepare_dataset(cfg)
    priors = build_priors(dataset, cfg.model, cfg.priors)
    header = {**_header("fit", cfg.to_dict(), cfg.seed), "method": cfg.method,
              "preprocess_report": report.to_dict(), "priors_resolved": priors.to_dict()}

    if cfg.method == "vi":
        try:
            res = fit_vi(dataset, cfg.model, priors, cfg.vi)
        except VIError as exc:
            io.dump_json({**header, "error": str(exc), "elbo_trace": exc.elbo_trace}, out / "failed_trace.json")
            raise
        fit = res.to_dict()
        fit.pop("wall_time")
        fit.pop("config")
        io.dump_json({**header, **fit}, out / "fit.json")
        summary = summarize(res.state, cfg.summary_level, seed=cfg.seed)
        wall = res.wall_time
    else:
        try:
            chain = run_chain(dataset, cfg.model, priors, cfg.mcmc)
        except MCMCError as exc:
            io.dump_json({**header, "error": str(exc)}, out / "failed_chain.json")
            raise
        write_chain(chain, out, header)
        summary = chain_summary(chain, cfg.summary_level)
        wall = chain.wall_time

    io.dump_json({**header, "level": cfg.summary_level, "parameters": summary}, out / "summary.json")
    _write_timing(out, {"method": cfg.method, "wall_time": wall})
    log.info("%s fit finished in %.2fs", cfg.method, wall)
    return EXIT_OK


def write_chain(chain: Chain, out: Path, header: dict) -> None:
    """Chain draws as CSV plus a JSON sidecar (timing lives in timing.json)."""
    with open(out / "chain.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(chain.names)
        for row in chain.draws:
            w.writerow([repr(float(v)) for v in row])
    io.dump_json({**header, "accept_rate": chain.accept_rate, "names": chain.names,
                  "n_draws": int(chain.draws.shape[0])}, out / "chain.json")


# ---------------------------------------------------------------------------
# predict


@dataclass
class PosteriorDraws:
    beta: np.ndarray       # K x B
    lambda_: np.ndarray    # K x L
    epsilon: np.ndarray    # K x S
    gamma: np.ndarray      # K


def load_fit(fit_dir: str | Path) -> tuple[dict, VariationalState | Chain]:
    fit_dir = Path(fit_dir)
    if (fit_dir / "fit.json").is_file():
        meta = json.loads((fit_dir / "fit.json").read_text())
        return meta, VariationalState.from_dict(meta["state"])
    if (fit_dir / "chain.json").is_file() and (fit_dir / "chain.csv").is_file():
        meta = json.loads((fit_dir / "chain.json").read_text())
        with open(fit_dir / "chain.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        draws = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
        return meta, Chain(rows[0], draws, meta.get("accept_rate", {}), float("nan"), meta.get("seed", 0))
    raise ConfigError(f"{fit_dir}: no fit.json or chain.json/chain.csv found")


def posterior_draws(source: VariationalState | Chain, n: int, rng: np.random.Generator,
                    n_beta: int, n_lambda: int) -> PosteriorDraws:
    if isinstance(source, VariationalState):
        def gauss(q):
            if q is None:
                return np.zeros((n, 0))
            return q.mean + q.std * rng.standard_normal((n, q.dim))

        beta, lam, eps = gauss(source.q_beta), gauss(source.q_lambda), gauss(source.q_epsilon)
        gamma = rng.gamma(source.q_gamma.shape, 1.0 / source.q_gamma.rate, size=n)
        return PosteriorDraws(beta, lam, eps, gamma)
    if source.draws.shape[0] == 0:
        raise ModelError("chain has no draws")
    rows = source.draws[rng.integers(0, source.draws.shape[0], size=n)]
    return PosteriorDraws(
        rows[:, :n_beta], rows[:, n_beta:n_beta + n_lambda], rows[:, n_beta + n_lambda:-2], rows[:, -2]
    )


def _shifted_mean(x: np.ndarray) -> np.ndarray:
    """Mean over axis 0, computed about the first row (exact for constant input)."""
    return x[0] + np.mean(x - x[0], axis=0)


def posterior_predict(dataset: Dataset, model: ModelConfig, draws: PosteriorDraws, rng: np.random.Generator,
                      level: float = 0.95, want_flows: bool = False, chunk: int = 50) -> dict:
    fm = ForwardModel(dataset, model)
    K = draws.gamma.shape[0]
    yhat = np.empty((K, dataset.n_stores))
    budgets = draws.beta @ dataset.customer_features.T          # K x N
    flow_sum = np.zeros((dataset.n_stores, dataset.n_customers)) if want_flows else None
    flow_ref = None
    for lo in range(0, K, chunk):
        hi = min(K, lo + chunk)
        ups = fm.upsilon(draws.lambda_[lo:hi], draws.epsilon[lo:hi])
        p = fm.probabilities_sn(ups)                             # k x S x N
        r = budgets[lo:hi]
        yhat[lo:hi] = (p @ r[:, :, None])[:, :, 0]
        if want_flows:
            f = p * r[:, None, :]
            if flow_ref is None:
                flow_ref = f[0].copy()
            flow_sum += np.sum(f - flow_ref, axis=0)
    noise = rng.standard_normal(yhat.shape) / np.sqrt(draws.gamma)[:, None]
    predictive = yhat + noise
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    out = {
        "mean": _shifted_mean(yhat),
        "lower": np.quantile(predictive, lo_q, axis=0),
        "upper": np.quantile(predictive, hi_q, axis=0),
        "budgets": _shifted_mean(budgets),
    }
    if want_flows:
        out["flows"] = (flow_ref + flow_sum / K).T                 # N x S
    return out


def cmd_predict(args) -> int:
    meta, source = load_fit(args.fit)
    cfg = resolve_run_config(meta["config"], ".", meta.get("method"))
    if args.stores:
        cfg.stores = str(Path(args.stores).resolve())
    if args.customers:
        cfg.customers = str(Path(args.customers).resolve())
    out = _out_dir(args.out)
    try:
        raw = io.load_dataset(cfg.stores, cfg.customers)
    except io.DataFormatError as exc:
        raise ConfigError(str(exc)) from None
    report = PreprocessReport.from_dict(meta.get("preprocess_report", {}))
    try:
        dataset = apply_feature_scaling(raw, report)
    except ModelError as exc:
        raise ConfigError(f"fit and dataset disagree: {exc}") from None

    n_beta = dataset.n_customer_features
    n_lambda = dataset.n_store_features if cfg.model.feature_driven else 0
    if isinstance(source, VariationalState):
        dims = (source.n_beta, source.n_lambda, source.n_stores)
    else:
        names = parameter_names(dataset, cfg.model)
        dims = (n_beta, n_lambda, dataset.n_stores) if source.names == names else None
    if dims != (n_beta, n_lambda, dataset.n_stores):
        raise ConfigError(
            f"fit dimensions {dims} do not match dataset (beta {n_beta}, lambda {n_lambda}, stores {dataset.n_stores})"
        )
    if not 0 < args.level < 1:
        raise ConfigError("--level must lie in (0, 1)")
    if args.n_draws < 1:
        raise ConfigError("--n-draws must be positive")

    seed = cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    draws = posterior_draws(source, args.n_draws, rng, n_beta, n_lambda)
    res = posterior_predict(dataset, cfg.model, draws, rng, args.level, want_flows=args.flows)

    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "predicted", "lower", "upper"])
        for s, sid in enumerate(dataset.store_ids):
            w.writerow([sid, repr(float(res["mean"][s])), repr(float(res["lower"][s])), repr(float(res["upper"][s]))])
    files = ["predictions.csv"]
    if args.flows:
        with open(out / "flows.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["customer_id", "store_id", "flow"])
            for n, cid in enumerate(dataset.customer_ids):
                for s, sid in enumerate(dataset.store_ids):
                    w.writerow([cid, sid, repr(float(res["flows"][n, s]))])
        files.append("flows.csv")
    if args.budgets or args.aggregate_by:
        with open(out / "budgets.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "budget"])
            for n, cid in enumerate(dataset.customer_ids):
                w.writerow([cid, repr(float(res["budgets"][n]))])
        files.append("budgets.csv")
    if args.aggregate_by:
        try:
            groups = io.read_column(cfg.customers, args.aggregate_by)
        except io.DataFormatError as exc:
            raise ConfigError(str(exc)) from None
        totals = aggregate_budgets(res["budgets"], groups)
        name = f"budgets_by_{args.aggregate_by}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "budget", "n_customers"])
            for g, (total, count) in totals.items():
                w.writerow([g, repr(total), count])
        files.append(name)

    pred_cfg = {"fit_dir": str(Path(args.fit).resolve()), "run": cfg.to_dict(), "n_draws": args.n_draws,
                "level": args.level, "flows": args.flows, "budgets": args.budgets,
                "aggregate_by": args.aggregate_by}
    io.dump_json({
        **_header("predict", pred_cfg, seed),
        "method": meta.get("method"),
        "scale": "log" if report.log_revenue else "raw",
        "files": files,
    }, out / "predictions.json")
    return EXIT_OK


def aggregate_budgets(budgets: np.ndarray, groups: Sequence[str]) -> dict[str, tuple[float, int]]:
    """Sum budgets per group label; groups are returned in sorted order."""
    if len(groups) != len(budgets):
        raise ConfigError(f"{len(groups)} group labels for {len(budgets)} customers")
    acc: dict[str, list[float]] = {}
    for g, b in zip(groups, budgets):
        acc.setdefault(g, []).append(float(b))
    return {g: (math.fsum(v), len(v)) for g, v in sorted(acc.items())}


# ---------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    raw = load_json_config(args.spec)
    if "spec" in raw:
        unknown = sorted(set(raw) - {"spec", "methods", "vi", "mcmc"})
        if unknown:
            raise ConfigError(f"unknown study field(s): {unknown}")
        spec_raw, methods = dict(raw["spec"]), raw.get("methods", ["vi", "mcmc"])
        vi_raw, mcmc_raw = _section(raw, "vi"), _section(raw, "mcmc")
    else:
        spec_raw, methods, vi_raw, mcmc_raw = raw, ["vi", "mcmc"], {}, {}
    if args.replicates is not None:
        spec_raw["n_replicates"] = args.replicates
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods or any(m not in ("vi", "mcmc") for m in methods):
        raise ConfigError(f"methods must be a nonempty subset of ['vi', 'mcmc'], got {methods}")
    try:
        spec = SimSpec.from_dict(spec_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    vi = _build(VIConfig, {"seed": spec.seed, **vi_raw}, "vi")
    mcmc = _build(MCMCConfig, {"seed": spec.seed, **mcmc_raw}, "mcmc")
    out = _out_dir(args.out)

    report = run_study(spec, methods, vi, mcmc)
    config = {
        "spec": spec.to_dict(),
        "methods": list(methods),
        "vi": {**asdict(vi), "adam_betas": list(vi.adam_betas)},
        "mcmc": {**asdict(mcmc), "init_step_sizes": np.atleast_1d(mcmc.init_step_sizes).tolist()},
    }
    report.write(out / "report.json", out / "report.csv", out / "timing.json")
    # embed config and seed alongside the report body
    body = json.loads((out / "report.json").read_text())
    io.dump_json({**_header("study", config, spec.seed), **body}, out / "report.json")
    timing = json.loads((out / "timing.json").read_text())
    _write_timing(out, {"methods": timing})
    return EXIT_OK


# ---------------------------------------------------------------------------
# huff


def _float_list(text: str | None, default: Sequence[float], name: str) -> list[float]:
    if text is None:
        return list(default)
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--{name} must be a comma-separated list of numbers") from None
    if not values:
        raise ConfigError(f"--{name} must not be empty")
    return values


def cmd_huff(args) -> int:
    cfg = load_run_config(args.config)
    out = _out_dir(args.out, cfg)
    dataset, report = prepare_dataset(cfg)
    exps = _float_list(args.exponents, DEFAULT_EXPONENTS, "exponents")
    decays = _float_list(args.decays, DEFAULT_DECAYS, "decays")
    try:
        fit = fit_huff(dataset, exps, decays, per_feature=args.per_feature)
    except HuffError as exc:
        raise ConfigError(str(exc)) from None
    header = {**_header("huff", cfg.to_dict(), cfg.seed), "preprocess_report": report.to_dict()}
    io.dump_json({**header, **fit.to_dict()}, out / "huff.json")
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "predicted"])
        for sid, v in zip(dataset.store_ids, fit.predictions):
            w.writerow([sid, repr(float(v))])
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _named_paths(items: Sequence[str] | None, flag: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--{flag} entries must look like NAME=PATH, got {item!r}")
        if name in out:
            raise ConfigError(f"--{flag}: duplicate name {name!r}")
        out[name] = path
    return out


def _read_id_values(path: str, column: str) -> dict[str, float]:
    try:
        ids = io.read_column(path, "id")
        values = io.read_column(path, column)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except io.DataFormatError as exc:
        raise ConfigError(str(exc)) from None
    try:
        return {i: float(v) for i, v in zip(ids, values)}
    except ValueError:
        raise ConfigError(f"{path}: column '{column}' has a non-numeric value") from None


def cmd_evaluate(args) -> int:
    preds = _named_paths(args.predictions, "predictions")
    if not preds:
        raise ConfigError("at least one --predictions NAME=PATH is required")
    timings = _named_paths(args.timing, "timing")
    observed = _read_id_values(args.observed, args.observed_column)
    ids = list(observed)
    y = np.array([observed[i] for i in ids])
    models = {}
    for name, path in sorted(preds.items()):
        p = _read_id_values(path, "predicted")
        missing = [i for i in ids if i not in p]
        if missing:
            raise ConfigError(f"{path}: no prediction for store id {missing[0]!r}")
        yhat = np.array([p[i] for i in ids])
        entry = {"n": len(ids)}
        for key, fn in (("r_squared", r_squared), ("nrmse", nrmse)):
            try:
                entry[key] = fn(y, yhat)
            except MetricError as exc:
                entry[key] = None
                entry[f"{key}_error"] = str(exc)
        models[name] = entry
    timing = {}
    for name, path in sorted(timings.items()):
        try:
            timing[name] = json.loads(Path(path).read_text())["wall_time"]
        except (FileNotFoundError, json.JSONDecodeError, KeyError):
            raise ConfigError(f"--timing {name}: cannot read wall_time from {path}") from None
    config = {"observed": str(Path(args.observed).resolve()), "observed_column": args.observed_column,
              "predictions": {k: str(Path(v).resolve()) for k, v in sorted(preds.items())},
              "timing": {k: str(Path(v).resolve()) for k, v in sorted(timings.items())}}
    result = {**_header("evaluate", config, None), "models": models}
    if timing:
        result["wall_time"] = timing
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {out.parent}: {exc}") from None
    io.dump_json(result, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsim", description="Bayesian spatial interaction model toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset and its true parameters")
    s.add_argument("--spec", help="JSON simulation spec (SimSpec fields); defaults to sim1")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--replicate", type=int, default=0, help="replicate index (default 0)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="apply edge correction, log transform and scaling")
    s.add_argument("--config", required=True, help="JSON run config")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("fit", help="fit the model with VI or MCMC")
    s.add_argument("--config", required=True, help="JSON run config")
    s.add_argument("--method", choices=("vi", "mcmc"), help="override the config's method")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="posterior predictive store revenues from a fit")
    s.add_argument("--fit", required=True, help="directory written by 'fit'")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--stores", help="stores CSV (default: the one used for fitting)")
    s.add_argument("--customers", help="customers CSV (default: the one used for fitting)")
    s.add_argument("--n-draws", type=int, default=1000, help="posterior draws (default 1000)")
    s.add_argument("--level", type=float, default=0.95, help="predictive interval level (default 0.95)")
    s.add_argument("--seed", type=int, help="RNG seed (default: the fit's seed)")
    s.add_argument("--flows", action="store_true", help="also write the customer-store flow matrix")
    s.add_argument("--budgets", action="store_true", help="also write per-customer budgets")
    s.add_argument("--aggregate-by", help="customers CSV column to sum budgets over")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("study", help="replicate simulation study")
    s.add_argument("--spec", required=True, help="JSON SimSpec, or {spec, methods, vi, mcmc}")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--methods", help="comma-separated subset of vi,mcmc")
    s.add_argument("--replicates", type=int, help="override n_replicates")
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("huff", help="fit the modified Huff baseline")
    s.add_argument("--config", required=True, help="JSON run config (data paths, preprocessing)")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.add_argument("--exponents", help="comma-separated attractiveness exponents")
    s.add_argument("--decays", help="comma-separated distance decays")
    s.add_argument("--per-feature", action="store_true", help="search exponents per store feature")
    s.set_defaults(func=cmd_huff)

    s = sub.add_parser("evaluate", help="R^2 and NRMSE of prediction files against observed revenue")
    s.add_argument("--observed", required=True, help="CSV with id and observed revenue")
    s.add_argument("--observed-column", default="revenue", help="observed column name (default revenue)")
    s.add_argument("--predictions", action="append", metavar="NAME=PATH", help="prediction CSV (repeatable)")
    s.add_argument("--timing", action="append", metavar="NAME=PATH", help="timing.json to report (repeatable)")
    s.add_argument("--out", required=True, help="output JSON file")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VIError, MCMCError, StudyError, ModelError, HuffError, MetricError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"bsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
