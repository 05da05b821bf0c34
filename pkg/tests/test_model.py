import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from bsim.distributions import GammaDist, GaussianDiag, gamma_logpdf, gaussian_logpdf
from bsim.geometry import Point2, Polygon
from bsim.model import (
    AttractionMode,
    CustomerRegion,
    Dataset,
    EdgeCorrection,
    FieldEntry,
    ForwardModel,
    ModelConfig,
    ModelError,
    ParameterVector,
    PreprocessReport,
    PriorSpec,
    Store,
    apply_feature_scaling,
    attraction_variance,
    customer_budget,
    log_joint,
    log_joint_terms,
    predict_revenues,
    preprocess,
    truncated_gaussian_pdf,
    visit_probabilities,
)

FD = ModelConfig(100.0, AttractionMode.FEATURE_DRIVEN)
SS = ModelConfig(100.0, AttractionMode.STORE_SPECIFIC)


def make_dataset(store_xy, customer_xy, store_feats=None, cust_feats=None, revenue=None, region=None):
    store_xy = np.asarray(store_xy, dtype=float)
    customer_xy = np.asarray(customer_xy, dtype=float)
    S, N = len(store_xy), len(customer_xy)
    return Dataset(
        store_ids=[f"s{i}" for i in range(S)],
        store_xy=store_xy,
        store_features=np.zeros((S, 1)) if store_feats is None else store_feats,
        revenue=np.ones(S) if revenue is None else revenue,
        customer_ids=[f"c{i}" for i in range(N)],
        customer_xy=customer_xy,
        customer_features=np.ones((N, 1)) if cust_feats is None else cust_feats,
        region=region,
    )


def random_instance(seed, S=4, N=12, D=2, P=2, radius=100.0):
    rng = np.random.default_rng(seed)
    ds = Dataset(
        store_ids=list(range(S)),
        store_xy=rng.uniform(0, 3, (S, 2)),
        store_features=rng.normal(size=(S, D)),
        revenue=rng.normal(3, 1, S),
        customer_ids=list(range(N)),
        customer_xy=rng.uniform(0, 3, (N, 2)),
        customer_features=rng.uniform(0.5, 1.5, (N, P)),
    )
    cfg = ModelConfig(radius, AttractionMode.FEATURE_DRIVEN)
    params = ParameterVector(rng.normal(size=P), rng.normal(0, 0.3, D), rng.normal(0, 0.3, S),
                             rng.gamma(2.0), rng.gamma(2.0))
    return ds, cfg, params


# --- types -----------------------------------------------------------------

def test_dataset_invariants():
    with pytest.raises(ModelError):
        make_dataset(np.zeros((0, 2)), [[0, 0]])
    with pytest.raises(ModelError):
        make_dataset([[0, 0]], [[0, 0]], revenue=[math.nan])
    with pytest.raises(ModelError):
        Dataset.from_records(
            [Store("a", Point2(0, 0), np.array([1.0]), 1.0), Store("b", Point2(1, 0), np.array([1.0, 2.0]), 1.0)],
            [CustomerRegion("c", Point2(0, 0), np.array([1.0]))],
        )


def test_dataset_record_roundtrip():
    ds, _, _ = random_instance(0)
    again = Dataset.from_records(ds.stores, ds.customers)
    assert np.array_equal(again.store_features, ds.store_features)
    assert np.array_equal(again.customer_xy, ds.customer_xy)
    assert again.store_ids == ds.store_ids


def test_config_and_params_validation():
    with pytest.raises(ModelError):
        ModelConfig(0.0)
    with pytest.raises(ModelError):
        ParameterVector([1.0], [], [0.0], gamma=0.0, alpha=1.0)
    ds, cfg, p = random_instance(1)
    bad = ParameterVector(p.beta, p.lambda_[:1], p.epsilon, p.gamma, p.alpha)
    with pytest.raises(ModelError):
        bad.validate(ds, cfg)
    with pytest.raises(ModelError):
        PriorSpec.default(ds, cfg, var_lambda=0.0)


# --- attraction variance and field ---------------------------------------------

def test_attraction_variance_examples():
    assert attraction_variance(SS, [], [], 0.0) == 1.0
    assert attraction_variance(FD, [1, 1], [0.1, 0.5], 0.0) == pytest.approx(math.exp(0.6))
    assert attraction_variance(FD, [3.0, -7.0], [0.0, 0.0], -1.0) == pytest.approx(math.exp(-1))
    with pytest.raises(ModelError):
        attraction_variance(FD, [1, 1], [0.1], 0.0)


def test_truncated_pdf_examples():
    o = Point2(0, 0)
    assert truncated_gaussian_pdf(FieldEntry(o, 1.0, 10.0), o) == pytest.approx(0.1591549, abs=1e-7)
    want = math.exp(-0.25) / (4 * math.pi * (1 - math.exp(-1)))
    got = truncated_gaussian_pdf(FieldEntry(o, 2.0, 2.0), Point2(1, 0))
    # the derivation exp(-1/4) / (4 pi (1 - e^-1)) evaluates to 0.0980430
    assert got == pytest.approx(want, rel=1e-12)
    assert got == pytest.approx(0.0980430019, abs=1e-10)
    assert truncated_gaussian_pdf(FieldEntry(o, 3.0, 2.0), Point2(2.001, 0)) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_truncated_pdf_normalizes_over_disc(seed):
    rng = np.random.default_rng(seed)
    var, dT = math.exp(rng.uniform(-2, 2)), rng.uniform(0.3, 5)
    e = FieldEntry(Point2(0, 0), var, dT)
    val, _ = integrate.dblquad(
        lambda r, th: r * truncated_gaussian_pdf(e, Point2(r * math.cos(th), r * math.sin(th))),
        0, 2 * math.pi, 0, dT,
    )
    assert val == pytest.approx(1.0, abs=1e-3)


def test_vectorized_field_matches_scalar_pdf():
    ds, cfg, p = random_instance(2, radius=1.5)
    fm = ForwardModel(ds, cfg)
    ups = fm.upsilon(p.lambda_, p.epsilon)
    logz = fm.log_field(ups)
    for n in range(ds.n_customers):
        for s in range(ds.n_stores):
            e = FieldEntry(Point2(*ds.store_xy[s]), math.exp(ups[s]), cfg.truncation_radius)
            z = truncated_gaussian_pdf(e, Point2(*ds.customer_xy[n]))
            if z == 0.0:
                assert logz[n, s] == -np.inf
            else:
                assert logz[n, s] == pytest.approx(math.log(z), abs=1e-10)


# --- probabilities and revenue -------------------------------------------

def test_visit_probability_examples():
    one = make_dataset([[0, 0]], [[0.5, 0]])
    assert visit_probabilities(one, SS, ParameterVector([1.0], [], [0.3], 1, 1)).tolist() == [[1.0]]
    sym = make_dataset([[-1, 0], [1, 0]], [[0, 0]])
    assert visit_probabilities(sym, SS, ParameterVector([1.0], [], [0.0, 0.0], 1, 1)) [0] == pytest.approx([0.5, 0.5])
    two = make_dataset([[1, 0], [-2, 0]], [[0, 0]])
    p = visit_probabilities(two, SS, ParameterVector([1.0], [], [0.0, 0.0], 1, 1))
    want = math.exp(-0.5) / (math.exp(-0.5) + math.exp(-2))
    assert p[0] == pytest.approx([want, 1 - want], abs=1e-12)
    assert p[0] == pytest.approx([0.81757, 0.18243], abs=1e-5)


def test_uncovered_customer_row_is_zero():
    ds = make_dataset([[0, 0], [1, 0]], [[0.2, 0], [50, 50]])
    cfg = ModelConfig(2.0, AttractionMode.STORE_SPECIFIC)
    p = visit_probabilities(ds, cfg, ParameterVector([1.0], [], [0.0, 0.0], 1, 1))
    assert p[1].tolist() == [0.0, 0.0]
    assert p[0].sum() == pytest.approx(1.0, abs=1e-12)
    assert ForwardModel(ds, cfg).n_uncovered == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 4.0))
def test_rows_are_stochastic(seed, radius):
    ds, cfg, p = random_instance(seed, S=5, N=30, radius=radius)
    fm = ForwardModel(ds, cfg)
    P = visit_probabilities(ds, cfg, p)
    assert np.all((P >= 0) & (P <= 1))
    sums = P.sum(axis=1)
    assert np.allclose(sums[fm.covered], 1.0, atol=1e-12, rtol=0)
    assert np.all(sums[~fm.covered] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-30, 30))
def test_probabilities_invariant_to_common_field_scale(seed, log_c):
    ds, cfg, p = random_instance(seed, radius=2.0)
    fm = ForwardModel(ds, cfg)
    logz = fm.log_field(fm.upsilon(p.lambda_, p.epsilon))
    P = fm.probabilities(fm.upsilon(p.lambda_, p.epsilon))

    def normalize(lz):
        with np.errstate(invalid="ignore"):
            top = np.max(lz, axis=1, keepdims=True)
            top[~np.isfinite(top)] = 0
            w = np.exp(lz - top)
            tot = w.sum(axis=1, keepdims=True)
            tot[tot == 0] = 1
            return w / tot

    assert np.allclose(normalize(logz + log_c), P, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_single_store_revenue_equals_covered_budgets(seed, eps):
    ds, _, _ = random_instance(seed, S=1, N=15)
    cfg = ModelConfig(1.5, AttractionMode.STORE_SPECIFIC)
    beta = np.array([0.7, -0.2])
    yhat = predict_revenues(ds, cfg, ParameterVector(beta, [], [eps], 1, 1))
    fm = ForwardModel(ds, cfg)
    assert yhat[0] == pytest.approx(float((ds.customer_features @ beta)[fm.covered].sum()), abs=1e-10)


def test_customer_budget_examples():
    c = CustomerRegion("c", Point2(0, 0), np.array([1.0, 1.0]))
    assert customer_budget(c, [0.0, 0.0]) == 0.0
    assert customer_budget(c, [-0.2, 0.4]) == pytest.approx(0.2)
    assert customer_budget(CustomerRegion("c", Point2(0, 0), np.array([3.0])), [1.0]) == 3.0
    with pytest.raises(ModelError):
        customer_budget(c, [1.0])


def test_predict_revenue_examples():
    sym = make_dataset([[-1, 0], [1, 0]], [[0, 0]], cust_feats=[[2.0]])
    params = ParameterVector([1.0], [], [0.0, 0.0], 1, 1)
    assert predict_revenues(sym, SS, params) == pytest.approx([1.0, 1.0])
    assert predict_revenues(sym, SS, ParameterVector([0.0], [], [0.0, 0.0], 1, 1)).tolist() == [0.0, 0.0]
    # store 1 is the only one in range of both customers
    cfg = ModelConfig(1.0, AttractionMode.STORE_SPECIFIC)
    ds = make_dataset([[0, 0], [10, 0]], [[0.1, 0], [0, 0.2]], cust_feats=[[1.0], [3.0]])
    yhat, flows = predict_revenues(ds, cfg, params, return_flows=True)
    assert yhat.tolist() == [4.0, 0.0]
    assert flows.shape == (2, 2) and flows.sum() == 4.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_revenue_linear_in_budgets(seed, c):
    ds, cfg, p = random_instance(seed)
    scaled = ParameterVector(c * p.beta, p.lambda_, p.epsilon, p.gamma, p.alpha)
    assert np.allclose(predict_revenues(ds, cfg, scaled), c * predict_revenues(ds, cfg, p), atol=1e-10)


def test_batched_forward_model_matches_loop():
    ds, cfg, p = random_instance(3, radius=1.2)
    fm = ForwardModel(ds, cfg)
    rng = np.random.default_rng(0)
    ups = rng.normal(size=(6, ds.n_stores))
    betas = rng.normal(size=(6, 2))
    batch = fm.revenues(betas, ups)
    for k in range(6):
        pk = fm.probabilities(ups[k])
        assert np.allclose(batch[k], fm.revenues(betas[k], ups[k], probs=pk), atol=1e-12)


# --- log joint ---------------------------------------------------------------

def _compositional(ds, cfg, p, pr):
    yhat = predict_revenues(ds, cfg, p)
    total = gaussian_logpdf(GaussianDiag(yhat, np.full(ds.n_stores, 1 / p.gamma)), ds.revenue)
    total += gaussian_logpdf(GaussianDiag(pr.mu_beta, np.full(len(p.beta), 1 / p.alpha)), p.beta)
    total += gamma_logpdf(GammaDist(pr.alpha_shape, pr.alpha_rate), p.alpha)
    total += gamma_logpdf(GammaDist(pr.gamma_shape, pr.gamma_rate), p.gamma)
    if cfg.feature_driven:
        total += gaussian_logpdf(GaussianDiag(pr.mu_lambda, pr.var_lambda), p.lambda_)
    total += gaussian_logpdf(GaussianDiag(pr.mu_epsilon, pr.var_epsilon), p.epsilon)
    return total


def test_log_joint_compositional_small_instance():
    ds, cfg, p = random_instance(4, S=2, N=3)
    pr = PriorSpec.default(ds, cfg, alpha_shape=2.0, gamma_rate=0.5, var_lambda=0.7)
    assert log_joint(ds, cfg, p, pr) == pytest.approx(_compositional(ds, cfg, p, pr), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_log_joint_compositional_random(seed):
    ds, cfg, p = random_instance(seed, S=3, N=6)
    pr = PriorSpec.default(ds, cfg)
    assert log_joint(ds, cfg, p, pr) == pytest.approx(_compositional(ds, cfg, p, pr), rel=1e-12, abs=1e-10)


def test_log_joint_likelihood_against_scipy():
    ds, cfg, p = random_instance(5)
    t = log_joint_terms(ds, cfg, p, PriorSpec.default(ds, cfg))
    yhat = predict_revenues(ds, cfg, p)
    want = stats.norm.logpdf(ds.revenue, yhat, 1 / math.sqrt(p.gamma)).sum()
    assert t["likelihood"] == pytest.approx(want, abs=1e-10)


def test_log_joint_store_specific_has_no_lambda_term():
    ds, _, p = random_instance(6)
    params = ParameterVector(p.beta, [], p.epsilon, p.gamma, p.alpha)
    terms = log_joint_terms(ds, SS, params, PriorSpec.default(ds, SS))
    assert "lambda" not in terms


def test_log_joint_gamma_monotone_at_zero_residual():
    ds, cfg, p = random_instance(7)
    ds = ds.with_revenue(predict_revenues(ds, cfg, p))
    pr = PriorSpec.default(ds, cfg)
    lik = [log_joint_terms(ds, cfg, ParameterVector(p.beta, p.lambda_, p.epsilon, g, 1.0), pr)["likelihood"]
           for g in (0.5, 1.0, 2.0, 8.0)]
    assert all(a < b for a, b in zip(lik, lik[1:]))


def test_log_joint_at_prior_means_is_finite_and_reproducible():
    ds, cfg, _ = random_instance(8)
    p0 = ParameterVector(np.zeros(2), np.zeros(2), np.zeros(ds.n_stores), 1.0, 1.0)
    ds = ds.with_revenue(np.zeros(ds.n_stores))
    pr = PriorSpec.default(ds, cfg)
    a = log_joint(ds, cfg, p0, pr)
    assert math.isfinite(a) and a == log_joint(ds, cfg, p0, pr)


@pytest.mark.filterwarnings("ignore:overflow")
def test_log_joint_names_nonfinite_term():
    ds, cfg, p = random_instance(9)
    ds = ds.with_revenue(np.full(ds.n_stores, 1e200))
    with pytest.raises(ModelError, match="likelihood"):
        log_joint(ds, cfg, p, PriorSpec.default(ds, cfg))


# --- preprocessing -----------------------------------------------------------

def test_preprocess_edge_examples():
    region = Polygon.rectangle(-100, -100, 100, 100)
    ds = make_dataset([[0, 0]], [[0, 0]], revenue=[100.0], region=region)
    cfg = ModelConfig(4.0)
    out, rep = preprocess(ds, cfg, EdgeCorrection(), standardize_stores=False, standardize_customers=False)
    assert out.revenue[0] == 100.0 and rep.area_fractions == [1.0]
    half = make_dataset([[0, 0]], [[0, 0]], revenue=[100.0], region=Polygon.rectangle(0, -100, 100, 100))
    out, rep = preprocess(half, cfg, EdgeCorrection(), standardize_stores=False, standardize_customers=False)
    assert rep.area_fractions[0] == pytest.approx(0.5, abs=0.01)
    assert out.revenue[0] == pytest.approx(100 * rep.area_fractions[0])
    out, _ = preprocess(half, cfg, EdgeCorrection(), log_revenue=True,
                        standardize_stores=False, standardize_customers=False)
    assert out.revenue[0] == pytest.approx(math.log(100 * rep.area_fractions[0]))


def test_preprocess_edge_needs_region():
    ds = make_dataset([[0, 0]], [[0, 0]])
    with pytest.raises(ModelError):
        preprocess(ds, ModelConfig(1.0), EdgeCorrection(), standardize_stores=False)


def test_preprocess_log_errors_on_nonpositive():
    ds = make_dataset([[0, 0], [1, 1]], [[0, 0]], revenue=[1.0, 0.0])
    with pytest.raises(ModelError, match="s1"):
        preprocess(ds, FD, log_revenue=True, standardize_stores=False, standardize_customers=False)


def test_standardization_shift_invariant_and_zero_variance_named():
    ds, cfg, _ = random_instance(10)
    a, rep = preprocess(ds, cfg)
    shifted = Dataset(ds.store_ids, ds.store_xy, ds.store_features + np.array([5.0, -3.0]), ds.revenue,
                      ds.customer_ids, ds.customer_xy, ds.customer_features + 2.0)
    b, _ = preprocess(shifted, cfg)
    assert np.allclose(a.store_features, b.store_features)
    assert np.allclose(a.customer_features, b.customer_features)
    assert np.allclose(a.store_features.mean(0), 0) and np.allclose(a.store_features.std(0), 1)
    const = Dataset(ds.store_ids, ds.store_xy, np.column_stack([ds.store_features[:, 0], np.ones(4)]),
                    ds.revenue, ds.customer_ids, ds.customer_xy, ds.customer_features)
    with pytest.raises(ModelError, match="f2"):
        preprocess(const, cfg)
    again = apply_feature_scaling(ds, PreprocessReport.from_dict(rep.to_dict()))
    assert np.allclose(again.store_features, a.store_features)
