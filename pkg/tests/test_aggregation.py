import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedci.aggregation import (
    DISTANCE_FLOOR,
    Distance,
    InverseVariance,
    Kernel,
    MomentSummary,
    RandomEffects,
    SampleSize,
    SiteValue,
    cif_aggregate,
    estimate_tau2,
    fed_cox_ivw,
    federate_arm_params,
    meta_combine,
    normalize,
    reference_from_moments,
    similarity_weights,
)
from fedci.dgp import SiteSample, concat_samples, gen_linear_sites, gen_survival_sites
from fedci.errors import Condition2Violation, DegenerateWeights, SingularInformation
from fedci.linear import fit_arm_ols, gram_summary, local_ate
from fedci.runtime import Network
from fedci.runtime.protocols import one_shot_ate
from fedci.survival import CifEstimate, CoxFit, StepCurve, aalen_johansen, fit_cox

from .conftest import linear_spec, survival_spec

SCHEMES = [SampleSize(), InverseVariance(), RandomEffects(), RandomEffects(0.3)]

values = st.floats(-100, 100, allow_nan=False)
variances = st.floats(1e-3, 10)
site_values = st.lists(st.tuples(values, variances, st.integers(1, 1000)), min_size=1, max_size=8)


def _ests(rows):
    return [SiteValue(v, s, n) for v, s, n in rows]


# ---------------------------------------------------------------- meta_combine


@pytest.mark.parametrize("scheme", SCHEMES)
def test_single_estimate_passes_through(scheme):
    agg = meta_combine([SiteValue(1.7, 0.2, 50)], scheme)
    assert agg.value == 1.7 and agg.variance == pytest.approx(0.2)
    assert agg.weights.tolist() == [1.0]


def test_sample_size_arithmetic():
    agg = meta_combine([SiteValue(1.0, 0.1, 100), SiteValue(2.0, 0.1, 300)], SampleSize())
    assert agg.value == pytest.approx(1.75, abs=1e-15)
    assert agg.variance == pytest.approx(0.1 * (0.25**2 + 0.75**2))


def test_weight_identities():
    ests = [SiteValue(v, 0.5, n) for v, n in ((1.0, 10), (4.0, 20), (-2.0, 70))]
    assert meta_combine(ests, InverseVariance()).value == pytest.approx(1.0, abs=1e-15)
    het = [SiteValue(1.0, 0.1, 1), SiteValue(3.0, 0.4, 1), SiteValue(0.0, 0.2, 1)]
    a = meta_combine(het, InverseVariance())
    b = meta_combine(het, RandomEffects(0.0))
    assert a.value == b.value and np.array_equal(a.weights, b.weights)


def test_ivw_weights_are_precisions():
    ests = [SiteValue(0.0, 1.0, 1), SiteValue(1.0, 0.25, 1)]
    agg = meta_combine(ests, InverseVariance())
    np.testing.assert_allclose(agg.weights, [0.2, 0.8])
    assert agg.variance == pytest.approx(0.2)  # 1 / sum of precisions


def test_meta_errors():
    with pytest.raises(ValueError):
        meta_combine([], SampleSize())
    with pytest.raises(DegenerateWeights):
        meta_combine([SiteValue(1.0, 0.0, 5), SiteValue(2.0, 1.0, 5)], InverseVariance())
    with pytest.raises(DegenerateWeights):
        meta_combine([SiteValue(1.0, 0.0, 5), SiteValue(2.0, 1.0, 5)], RandomEffects())
    with pytest.raises(TypeError):
        meta_combine([SiteValue(1.0, 1.0, 5)], Kernel())
    with pytest.raises(DegenerateWeights):
        normalize([0.0, 0.0])
    with pytest.raises(ValueError):
        RandomEffects(-1.0)
    with pytest.raises(ValueError):
        Kernel(0.0)
    with pytest.raises(ValueError):
        Distance("manhattan")


@settings(max_examples=200)
@given(site_values, st.sampled_from(SCHEMES))
def test_weights_are_a_probability_vector(rows, scheme):
    agg = meta_combine(_ests(rows), scheme)
    assert np.all(agg.weights >= 0)
    assert abs(agg.weights.sum() - 1.0) < 1e-12
    assert agg.variance >= 0
    lo, hi = min(r[0] for r in rows), max(r[0] for r in rows)
    assert lo - 1e-9 <= agg.value <= hi + 1e-9


# a fixed tau^2 is in the units of the estimates, so only the scale-free schemes qualify
@settings(max_examples=100)
@given(site_values, st.sampled_from(SCHEMES[:3]), st.floats(-10, 10).filter(lambda c: abs(c) > 1e-3))
def test_meta_scale_equivariance(rows, scheme, c):
    a = meta_combine(_ests(rows), scheme)
    b = meta_combine([SiteValue(c * v, c * c * s, n) for v, s, n in rows], scheme)
    assert b.value == pytest.approx(c * a.value, rel=1e-9, abs=1e-9)
    assert b.variance == pytest.approx(c * c * a.variance, rel=1e-9)


@settings(max_examples=100)
@given(site_values, st.sampled_from(SCHEMES), st.randoms(use_true_random=False))
def test_meta_permutation_invariance(rows, scheme, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    a = meta_combine(_ests(rows), scheme)
    b = meta_combine(_ests(shuffled), scheme)
    assert b.value == pytest.approx(a.value, rel=1e-12, abs=1e-12)
    assert b.variance == pytest.approx(a.variance, rel=1e-12)


# ---------------------------------------------------------------- tau^2


def test_tau2_zero_cases():
    assert estimate_tau2([SiteValue(1.0, 0.1, 1)] * 4) == 0.0
    # spread well below the within-site noise: Q < K - 1 and the estimate truncates
    assert estimate_tau2([SiteValue(v, 1.0, 1) for v in (0.0, 0.1, -0.1)]) == 0.0
    with pytest.raises(ValueError):
        estimate_tau2([SiteValue(1.0, 0.1, 1)])


def test_tau2_recovers_between_site_variance():
    # independent calibration: K = 50 sites, true between-site SD 0.5, known within-site variances
    rng = np.random.default_rng(2024)
    K = 50
    v = rng.uniform(0.01, 0.05, K)
    est = []
    for _ in range(200):
        theta = rng.normal(0.0, 0.5, K)
        y = theta + rng.normal(0.0, np.sqrt(v))
        est.append(estimate_tau2([SiteValue(a, b, 1) for a, b in zip(y, v)]))
    est = np.array(est)
    assert abs(np.mean(est) / 0.25 - 1) < 0.30
    # a single draw is within 30% most of the time at K = 50
    assert np.mean(np.abs(est / 0.25 - 1) < 0.30) > 0.7


# ---------------------------------------------------------------- similarity weights


def _moments(means, n=10):
    return [MomentSummary(n, n * np.asarray(m, dtype=float), np.eye(len(m)) * n) for m in means]


def test_kernel_uniform_when_sites_match_reference():
    ms = _moments([[1.0, 2.0]] * 3)
    ref = reference_from_moments(ms)
    np.testing.assert_allclose(similarity_weights(ms, ref, Kernel(0.5)), 1 / 3, atol=1e-15)


def test_kernel_uniform_as_bandwidth_grows():
    ms = _moments([[0.0], [1.0], [5.0]])
    ref = reference_from_moments(ms)
    np.testing.assert_allclose(similarity_weights(ms, ref, Kernel(1e8)), 1 / 3, atol=1e-12)
    w = similarity_weights(ms, ref, Kernel(1.0))
    assert w[2] < w[0]


def test_kernel_formula():
    ms = _moments([[0.0], [2.0]])
    ref = reference_from_moments(ms)  # mean 1
    sigma = 0.7
    raw = np.exp(-np.array([1.0, 1.0]) / (2 * sigma**2))
    np.testing.assert_allclose(similarity_weights(ms, ref, Kernel(sigma)), raw / raw.sum())


def test_distance_weights_arithmetic():
    from fedci.aggregation import ReferenceSummary

    ref = ReferenceSummary(np.zeros(2), np.eye(2), 30)
    ms = _moments([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(similarity_weights(ms, ref, Distance()), [2 / 3, 1 / 3], atol=1e-15)
    # Mahalanobis with a scaled covariance changes both distances by the same factor
    ref4 = ReferenceSummary(np.zeros(2), 4 * np.eye(2), 30)
    np.testing.assert_allclose(similarity_weights(ms, ref4, Distance("mahalanobis")), [2 / 3, 1 / 3], atol=1e-15)


def test_distance_floor_for_exact_match():
    from fedci.aggregation import ReferenceSummary

    ref = ReferenceSummary(np.zeros(1), np.eye(1), 30)
    w = similarity_weights(_moments([[0.0], [1.0]]), ref, Distance())
    assert np.all(np.isfinite(w))
    assert w[1] == pytest.approx(DISTANCE_FLOOR / (1 + DISTANCE_FLOOR))


def test_reference_from_moments_matches_pooled_sample():
    sites = gen_linear_sites(linear_spec(sizes=(50, 80), means=[[0.0, 0.0], [1.0, -1.0]]), 3)
    ref = reference_from_moments([MomentSummary.from_sample(s) for s in sites])
    X = concat_samples(sites).X
    np.testing.assert_allclose(ref.mean, X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(ref.cov, np.cov(X.T), atol=1e-12)
    assert np.all(np.linalg.eigvalsh(ref.cov) >= 0)


@settings(max_examples=100)
@given(
    st.lists(st.lists(st.floats(-5, 5), min_size=2, max_size=2), min_size=2, max_size=6),
    st.sampled_from([Kernel(0.3), Kernel(2.0), Distance(), Distance("mahalanobis")]),
)
def test_similarity_weights_probability_vector(means, scheme):
    ms = [MomentSummary(10, 10 * np.asarray(m), 10 * (np.eye(2) + np.outer(m, m))) for m in means]
    w = similarity_weights(ms, reference_from_moments(ms), scheme)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


# ---------------------------------------------------------------- one-shot


def test_one_shot_ivw_equals_pooled_ols():
    spec = linear_spec(sizes=(150, 250, 100), p=(0.2, 0.5, 0.8), means=[[0, 0], [1, 1], [-1, 2]])
    sites = gen_linear_sites(spec, 4)
    res = one_shot_ate(Network(sites), "ivw")
    pooled = local_ate(concat_samples(sites))
    assert abs(res.value - pooled.value) < 1e-8


@pytest.mark.parametrize("mode", ["sw", "ivw"])
def test_one_shot_single_site_is_local(mode):
    s = gen_linear_sites(linear_spec(sizes=(200,), p=(0.5,)), 5)
    assert one_shot_ate(Network(s), mode).value == pytest.approx(local_ate(s[0]).value, abs=1e-10)


def test_identical_grams_make_sw_and_ivw_coincide():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((60, 2))
    W = np.tile([1, 0], 30)
    sites = [SiteSample(k, X, W=W, Y=X @ [1.0, -1.0] + W + rng.standard_normal(60)) for k in range(3)]
    sw = federate_arm_params([(s.n, fit_arm_ols(s, 1), fit_arm_ols(s, 0)) for s in sites], "sw")
    ivw = federate_arm_params([gram_summary(s) for s in sites], "ivw")
    for a, b in zip(sw, ivw):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_singular_summed_gram_is_condition2_violation():
    X = np.ones((6, 1))  # constant covariate collinear with the intercept
    s = SiteSample(0, X, W=[1, 0, 1, 0, 1, 0], Y=np.arange(6.0))
    with pytest.raises(Condition2Violation):
        federate_arm_params([gram_summary(s)], "ivw")
    with pytest.raises(ValueError):
        federate_arm_params([gram_summary(s)], "median")


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.lists(st.integers(30, 200), min_size=1, max_size=4))
def test_one_shot_ivw_is_pooled_on_random_instances(seed, sizes):
    K = len(sizes)
    rng = np.random.default_rng(seed)
    spec = linear_spec(sizes=sizes, p=rng.uniform(0.2, 0.8, K), means=rng.normal(size=(K, 2)))
    sites = gen_linear_sites(spec, seed)
    assert abs(one_shot_ate(Network(sites), "ivw").value - local_ate(concat_samples(sites)).value) < 1e-8


# ---------------------------------------------------------------- Cox


def _fit(beta, H, n):
    return CoxFit(np.asarray(beta, float), np.asarray(H, float), n, 0.0, True, 1)


def test_fed_cox_single_site():
    f = _fit([0.3, -0.2], [[2.0, 0.1], [0.1, 1.0]], 100)
    agg = fed_cox_ivw([f])
    np.testing.assert_allclose(agg.value, f.beta, atol=1e-14)
    np.testing.assert_allclose(agg.variance, np.linalg.inv(100 * f.info), atol=1e-14)


def test_fed_cox_equal_information_is_sample_size_mean():
    H = [[2.0, 0.3], [0.3, 1.0]]
    fits = [_fit([1.0, 0.0], H, 100), _fit([0.0, 1.0], H, 300)]
    np.testing.assert_allclose(fed_cox_ivw(fits).value, [0.25, 0.75], atol=1e-14)


def test_fed_cox_singular():
    with pytest.raises(SingularInformation):
        fed_cox_ivw([_fit([0.0], [[0.0]], 10)])
    with pytest.raises(ValueError):
        fed_cox_ivw([])


@pytest.mark.slow
def test_fed_cox_tracks_pooled_cox():
    spec = survival_spec(sizes=(1500, 1500), rates=(1.0, 1.0))
    worst = 0.0
    for r in range(200):
        sites = gen_survival_sites(spec, 10_000 + r)
        agg = fed_cox_ivw([fit_cox(s) for s in sites])
        pooled = fit_cox(concat_samples(sites))
        worst = max(worst, np.max(np.abs(agg.value - pooled.beta)))
    assert worst < 0.02


# ---------------------------------------------------------------- CIF


def _curve(times, values, variances, n, cause=1):
    return CifEstimate(cause, StepCurve(np.asarray(times, float), np.asarray(values, float), np.asarray(variances, float)), n)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_identical_curves_are_preserved(scheme):
    c = _curve([1.0, 2.0, 3.0], [0.1, 0.3, 0.4], [0.01, 0.02, 0.02], 50)
    out = cif_aggregate([c, c, c], scheme)
    np.testing.assert_allclose(out.curve.values, c.curve.values, atol=1e-15)
    np.testing.assert_allclose(out.curve.times, c.curve.times)


def test_two_site_sample_size_is_pointwise_mean_on_union_grid():
    a = _curve([1.0, 3.0], [0.2, 0.4], [0.01, 0.01], 40)
    b = _curve([2.0], [0.6], [0.02], 40)
    out = cif_aggregate([a, b], SampleSize())
    np.testing.assert_allclose(out.curve.times, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(out.curve.values, [0.1, 0.4, 0.5], atol=1e-15)
    assert out.rearranged == 0


def test_inverse_variance_weights_per_time_and_floor():
    a = _curve([1.0, 2.0], [0.2, 0.5], [0.0, 0.01], 10)
    b = _curve([1.0, 2.0], [0.4, 0.7], [0.01, 0.03], 10)
    out = cif_aggregate([a, b], InverseVariance())
    assert out.floored == 1
    assert out.weights[0, 0] > 0.999
    np.testing.assert_allclose(out.weights[:, 1], [0.75, 0.25])
    assert out.curve.values[1] == pytest.approx(0.75 * 0.5 + 0.25 * 0.7)


def test_cif_aggregate_errors():
    a = _curve([1.0], [0.2], [0.01], 10, cause=1)
    b = _curve([1.0], [0.2], [0.01], 10, cause=2)
    with pytest.raises(ValueError):
        cif_aggregate([a, b])
    with pytest.raises(ValueError):
        cif_aggregate([])
    with pytest.raises(TypeError):
        cif_aggregate([a], Kernel())


def _random_cif(rng, n):
    from fedci.dgp import CauseSpec, Hazard, SurvivalDgpSpec

    causes = [CauseSpec([0.0], [Hazard(rate=rng.uniform(0.2, 2))]), CauseSpec([0.0], [Hazard(rate=rng.uniform(0.2, 2))])]
    spec = SurvivalDgpSpec([n], np.zeros((1, 1)), np.eye(1), causes, rng.uniform(0, 1))
    return aalen_johansen(gen_survival_sites(spec, int(rng.integers(1 << 30)))[0], 1)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 5), st.sampled_from(SCHEMES))
def test_cif_aggregate_monotone_bounded_permutation_invariant(seed, K, scheme):
    rng = np.random.default_rng(seed)
    curves = [_random_cif(rng, int(rng.integers(10, 80))) for _ in range(K)]
    out = cif_aggregate(curves, scheme)
    v = out.curve.values
    assert np.all(np.diff(v) >= -1e-15) and np.all(v >= 0) and np.all(v <= 1 + 1e-12)
    np.testing.assert_allclose(out.weights.sum(axis=0), 1.0, atol=1e-12)
    perm = rng.permutation(K)
    again = cif_aggregate([curves[i] for i in perm], scheme)
    np.testing.assert_allclose(again.curve.values, v, atol=1e-12)


def test_sample_size_cif_converges_to_the_mixture():
    # heterogeneous exponential competing risks; large-n oracle is the rho-weighted mix of site CIFs
    from fedci.dgp import CauseSpec, Hazard, SurvivalDgpSpec, true_estimands

    causes = [
        CauseSpec([0.0], [Hazard(rate=0.5), Hazard(rate=1.5)]),
        CauseSpec([0.0], [Hazard(rate=0.5), Hazard(rate=0.2)]),
    ]
    spec = SurvivalDgpSpec([20_000, 60_000], np.zeros((2, 1)), np.eye(1), causes, 0.2)
    grid = np.array([0.25, 0.5, 1.0])
    truth = true_estimands(spec, grid)
    site1 = truth.site_cif[:, 0]
    mixture = 0.25 * site1[0] + 0.75 * site1[1]
    np.testing.assert_allclose(truth.cif[0], mixture, atol=1e-15)
    sites = gen_survival_sites(spec, 77)
    out = cif_aggregate([aalen_johansen(s, 1) for s in sites], SampleSize())
    se = np.sqrt(out.curve.variance_at(grid))
    assert np.all(np.abs(out(grid) - mixture) < 4 * se)
    # and it is far from the first site's CIF
    assert np.all(np.abs(out(grid) - site1[0]) > 10 * se)
