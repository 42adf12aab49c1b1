"""Reference machinery: quadrature, posterior closures, RWM, and KL metrics."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from rvgal import (
    ModelKind,
    Theta,
    compare_gaussian_vs_samples,
    full_log_posterior,
    gauss_hermite,
    gaussian_kl,
    lmm_partial_loglik,
    make_log_posterior,
    quadrature_partial_loglik,
    rwm_sample,
    simulate_lmm,
    simulate_logistic,
    symmetric_gaussian_kl,
)
from rvgal.reference import McmcOutput
from conftest import make_group, make_theta


# ---------------------------------------------------------------------------
# Quadrature.


def test_gauss_hermite_low_order_closed_forms():
    r1 = gauss_hermite(1)
    np.testing.assert_allclose(r1.nodes, [0.0], atol=1e-15)
    np.testing.assert_allclose(r1.weights, [math.sqrt(math.pi)], rtol=1e-14)
    r2 = gauss_hermite(2)
    np.testing.assert_allclose(sorted(r2.nodes), [-math.sqrt(0.5), math.sqrt(0.5)], rtol=1e-14)


@pytest.mark.parametrize("order", [3, 20, 50])
def test_gauss_hermite_moments(order):
    # exact for polynomials up to degree 2*order-1 against the e^{-x^2} weight
    rule = gauss_hermite(order)
    assert rule.order == order
    assert rule.weights.sum() == pytest.approx(math.sqrt(math.pi), rel=1e-13)
    assert float(rule.weights @ rule.nodes**2) == pytest.approx(math.sqrt(math.pi) / 2, rel=1e-12)
    assert float(rule.weights @ rule.nodes) == pytest.approx(0.0, abs=1e-12)


def test_gauss_hermite_order_bounds():
    for bad in (0, 201):
        with pytest.raises(ValueError):
            gauss_hermite(bad)


def test_quadrature_matches_lmm_closed_form(rng):
    """Prior-scaled nodes resolve the conditional posterior as long as the
    random-effect scale does not dwarf it, so keep the variance ratio mild;
    far outside that envelope plain (non-adapted) quadrature degrades."""
    rule = gauss_hermite(50)
    ds = simulate_lmm(n_groups=25, n_per_group=4, sigma_alpha=0.3, sigma_eps=1.0, seed=7)
    base = np.array([-1.5, 1.5, 0.5, 0.25])
    for g in ds.groups:
        th = Theta.from_parts(
            ModelKind.LINEAR_MIXED,
            base + 0.2 * rng.standard_normal(4),
            [2 * np.log(0.3) + 0.2 * rng.standard_normal(), 0.2 * rng.standard_normal()],
        )
        want = lmm_partial_loglik(g, th)
        got = quadrature_partial_loglik(ModelKind.LINEAR_MIXED, g, th, rule)
        assert got == pytest.approx(want, abs=1e-8)


def test_logistic_quadrature_converges_in_order():
    ds = simulate_logistic(n_groups=3, n_per_group=8, seed=3)
    th = Theta.from_parts(ModelKind.LOGISTIC_MIXED, [-1.5, 1.5, 0.5, 0.25], [2 * np.log(0.9)])
    for g in ds.groups:
        lo = quadrature_partial_loglik(ModelKind.LOGISTIC_MIXED, g, th, gauss_hermite(30))
        hi = quadrature_partial_loglik(ModelKind.LOGISTIC_MIXED, g, th, gauss_hermite(60))
        assert lo == pytest.approx(hi, abs=1e-8)


# ---------------------------------------------------------------------------
# Posterior evaluators.


def test_full_log_posterior_with_no_groups_is_prior_density():
    th = Theta.from_parts(ModelKind.LINEAR_MIXED, [0.3, -0.2], [0.1, -0.4])
    mean = np.zeros(4)
    cov = np.diag([10.0, 10.0, 1.0, 1.0])
    got = full_log_posterior(ModelKind.LINEAR_MIXED, [], mean, cov, th)
    want = multivariate_normal.logpdf(th.values, mean=mean, cov=cov)
    assert got == pytest.approx(want, rel=1e-13)


def test_full_log_posterior_requires_rule_for_logistic():
    ds = simulate_logistic(n_groups=2, n_per_group=4, seed=0)
    th = Theta.from_parts(ModelKind.LOGISTIC_MIXED, np.zeros(ds.n_fixed), [0.0])
    with pytest.raises(ValueError):
        full_log_posterior(ds.model, ds, np.zeros(th.values.size), np.eye(th.values.size), th)


@pytest.mark.parametrize("family", ["lmm", "logistic"])
def test_fast_closure_equals_per_group_sum(family, rng):
    if family == "lmm":
        ds = simulate_lmm(n_groups=12, n_per_group=6, seed=5)
        rules = [None, gauss_hermite(40)]
    else:
        ds = simulate_logistic(n_groups=12, n_per_group=6, seed=5)
        rules = [gauss_hermite(40)]
    d = ds.model.layout(ds.n_fixed).dim
    prior_mean = np.zeros(d)
    prior_cov = np.diag(np.concatenate([np.full(ds.n_fixed, 10.0), np.ones(d - ds.n_fixed)]))
    for rule in rules:
        fast = make_log_posterior(ds.model, ds, prior_mean, prior_cov, rule=rule)
        for _ in range(5):
            th = make_theta(ds.model, rng, p=ds.n_fixed)
            want = full_log_posterior(ds.model, ds, prior_mean, prior_cov, th, rule=rule)
            assert fast(th.values) == pytest.approx(want, rel=1e-10)


def test_fast_closure_handles_ragged_groups(rng):
    ds = simulate_lmm(n_groups=4, n_per_group=5, seed=3)
    ragged = list(ds.groups)
    ragged[2] = make_group(ModelKind.LINEAR_MIXED, rng, n=9, p=ds.n_fixed)
    d = ds.model.layout(ds.n_fixed).dim
    fast = make_log_posterior(ds.model, ragged, np.zeros(d), np.eye(d))
    th = make_theta(ds.model, rng, p=ds.n_fixed)
    want = full_log_posterior(ds.model, ragged, np.zeros(d), np.eye(d), th)
    assert fast(th.values) == pytest.approx(want, rel=1e-10)


# ---------------------------------------------------------------------------
# Random-walk Metropolis.


def test_rwm_recovers_standard_gaussian_moments():
    target = lambda x: -0.5 * float(x @ x)
    out = rwm_sample(target, np.zeros(2), n_iter=30000, n_burnin=5000, rng=np.random.default_rng(1))
    assert out.draws.shape == (25000, 2)
    assert 0.1 < out.acceptance_rate < 0.6
    np.testing.assert_allclose(out.draws.mean(axis=0), [0.0, 0.0], atol=0.08)
    np.testing.assert_allclose(np.cov(out.draws.T), np.eye(2), atol=0.12)


def test_rwm_adapts_toward_target_acceptance():
    # anisotropic target: untuned isotropic proposals would not land near 0.234
    cov = np.diag([100.0, 0.01])
    prec = np.linalg.inv(cov)
    target = lambda x: -0.5 * float(x @ prec @ x)
    out = rwm_sample(target, np.zeros(2), n_iter=40000, n_burnin=10000, rng=np.random.default_rng(7))
    assert out.acceptance_rate == pytest.approx(0.234, abs=0.08)
    np.testing.assert_allclose(out.draws.std(axis=0), [10.0, 0.1], rtol=0.15)


def test_rwm_is_deterministic_given_seed():
    target = lambda x: -0.5 * float(x @ x)
    a = rwm_sample(target, np.zeros(1), 2000, 500, np.random.default_rng(3))
    b = rwm_sample(target, np.zeros(1), 2000, 500, np.random.default_rng(3))
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.acceptance_rate == b.acceptance_rate


def test_rwm_validates_inputs():
    target = lambda x: -0.5 * float(x @ x)
    with pytest.raises(ValueError):
        rwm_sample(target, np.zeros(1), 100, 100, np.random.default_rng(0))
    with pytest.raises(ValueError):
        rwm_sample(lambda x: float("nan"), np.zeros(1), 100, 10, np.random.default_rng(0))


def test_exact_and_quadrature_chains_agree_for_lmm():
    """Two chains, one on the closed-form marginal and one on the order-50
    quadrature, must have marginal means within chain noise of each other."""
    from rvgal import default_prior

    ds = simulate_lmm(n_groups=30, n_per_group=4, sigma_alpha=0.3, sigma_eps=1.0, seed=21)
    prior = default_prior(ds.model, ds.n_fixed)
    pm, pc = prior.mean, prior.covariance()
    exact = make_log_posterior(ds.model, ds, pm, pc)
    quad = make_log_posterior(ds.model, ds, pm, pc, rule=gauss_hermite(50))
    a = rwm_sample(exact, pm, 20000, 5000, np.random.default_rng(10))
    b = rwm_sample(quad, pm, 5000 + 15000, 5000, np.random.default_rng(11))
    n = a.draws.shape[0]
    # autocorrelation eats roughly a factor 25 of the nominal sample size here
    se = a.draws.std(axis=0, ddof=1) / np.sqrt(n / 25)
    z = np.abs(a.draws.mean(axis=0) - b.draws.mean(axis=0)) / se
    assert float(z.max()) < 2.0, f"z-scores {z}"


# ---------------------------------------------------------------------------
# KL divergences and the comparison report.


def test_gaussian_kl_zero_on_identical():
    mean = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    assert gaussian_kl(mean, cov, mean, cov) == pytest.approx(0.0, abs=1e-12)


def test_gaussian_kl_univariate_closed_form():
    # KL(N(m0,v0) || N(m1,v1)) = log(s1/s0) + (v0 + (m0-m1)^2)/(2 v1) - 1/2
    m0, v0, m1, v1 = 0.7, 2.0, -0.3, 0.5
    want = 0.5 * math.log(v1 / v0) + (v0 + (m0 - m1) ** 2) / (2 * v1) - 0.5
    got = gaussian_kl([m0], [[v0]], [m1], [[v1]])
    assert got == pytest.approx(want, rel=1e-12)
    sym = symmetric_gaussian_kl([m0], [[v0]], [m1], [[v1]])
    rev = gaussian_kl([m1], [[v1]], [m0], [[v0]])
    assert sym == pytest.approx(want + rev, rel=1e-12)


def test_gaussian_kl_is_invariant_to_joint_rotation(rng):
    mean0, mean1 = rng.standard_normal(3), rng.standard_normal(3)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    cov0 = a @ a.T + np.eye(3)
    cov1 = b @ b.T + np.eye(3)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    base = gaussian_kl(mean0, cov0, mean1, cov1)
    rotated = gaussian_kl(q @ mean0, q @ cov0 @ q.T, q @ mean1, q @ cov1 @ q.T)
    assert rotated == pytest.approx(base, rel=1e-10)


def test_comparison_report_on_matched_samples(rng):
    class Gauss:
        mean = np.array([0.5, -1.0])

        def covariance(self):
            return np.diag([4.0, 0.25])

    draws = rng.standard_normal((200000, 2)) * np.array([2.0, 0.5]) + np.array([0.5, -1.0])
    report = compare_gaussian_vs_samples(Gauss(), McmcOutput(draws=draws, acceptance_rate=0.3, n_burnin=0))
    assert report.n_draws == 200000
    assert float(np.max(report.standardized_mean_gap)) < 0.02
    np.testing.assert_allclose(report.sd_ratio, [1.0, 1.0], atol=0.02)
    assert report.symmetric_kl < 1e-3
    d = report.to_dict()
    assert set(d) >= {"param_names", "standardized_mean_gap", "sd_ratio", "symmetric_kl"}


def test_comparison_report_flags_disagreement(rng):
    class Gauss:
        mean = np.array([3.0])

        def covariance(self):
            return np.array([[1.0]])

    draws = rng.standard_normal((5000, 1))
    report = compare_gaussian_vs_samples(Gauss(), McmcOutput(draws=draws, acceptance_rate=0.3, n_burnin=0))
    assert report.standardized_mean_gap[0] == pytest.approx(3.0, abs=0.15)


def test_comparison_report_rejects_thin_samples():
    class Gauss:
        mean = np.zeros(2)

        def covariance(self):
            return np.eye(2)

    with pytest.raises(ValueError):
        compare_gaussian_vs_samples(
            Gauss(), McmcOutput(draws=np.zeros((50, 2)), acceptance_rate=0.1, n_burnin=0)
        )
