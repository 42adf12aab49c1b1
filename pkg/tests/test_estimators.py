"""Importance-weighted score/Hessian estimators: algebra, streams, and bands."""

from __future__ import annotations

import numpy as np
import pytest

from rvgal import (
    EstimatorDegenerateError,
    ImportanceProposal,
    ModelKind,
    Theta,
    alpha_prior_logpdf,
    batch_grad_hess,
    draw_weighted_alphas,
    fisher_gradient,
    grad_hess_estimate,
    joint_grad,
    joint_hessian,
    lmm_exact_grad,
    lmm_exact_hessian,
    louis_hessian,
    sample_alpha_prior,
)
from conftest import make_group, make_theta

MODELS = [ModelKind.LINEAR_MIXED, ModelKind.LOGISTIC_MIXED]


def weighted_se(values: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Delta-method standard error of a self-normalized weighted mean."""
    mean = np.tensordot(w, values, axes=(0, 0))
    centered = values - mean
    return np.sqrt(np.tensordot(w**2, centered**2, axes=(0, 0)))


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.value)
def test_weights_normalize_and_ess_in_range(model, rng):
    g = make_group(model, rng)
    th = make_theta(model, rng)
    samples = draw_weighted_alphas(model, g, th, 64, rng)
    assert samples.alphas.shape == (64,)
    assert np.all(samples.norm_weights >= 0)
    assert samples.norm_weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert 1.0 <= samples.ess <= 64.0


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.value)
def test_single_draw_collapses_to_joint_derivatives(model, rng):
    """One draw means weight one: the estimates are the joint grad/Hessian, bitwise."""
    g = make_group(model, rng)
    th = make_theta(model, rng)
    est = grad_hess_estimate(model, g, th, 1, np.random.default_rng(11))
    alpha = sample_alpha_prior(model, th, 1, np.random.default_rng(11))[0]
    np.testing.assert_array_equal(est.grad, joint_grad(model, g, alpha, th))
    np.testing.assert_array_equal(est.hessian, joint_hessian(model, g, alpha, th))
    assert est.ess == 1.0


def test_prior_as_explicit_proposal_matches_default_path(rng):
    """Handing the prior in through the hook reproduces the built-in weighting."""
    model = ModelKind.LOGISTIC_MIXED
    g = make_group(model, rng)
    th = make_theta(model, rng)

    prop = ImportanceProposal(
        sample=lambda theta, count, r: sample_alpha_prior(model, theta, count, r),
        log_density=lambda alphas, theta: alpha_prior_logpdf(model, alphas, theta),
    )
    default = draw_weighted_alphas(model, g, th, 256, np.random.default_rng(5))
    hooked = draw_weighted_alphas(model, g, th, 256, np.random.default_rng(5), proposal=prop)
    np.testing.assert_array_equal(default.alphas, hooked.alphas)
    np.testing.assert_allclose(default.norm_weights, hooked.norm_weights, rtol=1e-12)


def test_all_underflowed_weights_raise(rng):
    base = make_group(ModelKind.LINEAR_MIXED, rng)
    # responses so far out that every squared residual overflows to -inf log-weight
    from rvgal import GroupData

    g = GroupData(group_id="far", y=np.full(base.n, 1e200), X=base.X, z=base.z)
    th = Theta.from_parts(ModelKind.LINEAR_MIXED, np.zeros(g.n_fixed), [0.0, 0.0])
    with np.errstate(over="ignore"):
        with pytest.raises(EstimatorDegenerateError):
            draw_weighted_alphas(ModelKind.LINEAR_MIXED, g, th, 16, np.random.default_rng(1))


def test_louis_hessian_symmetric(rng):
    g = make_group(ModelKind.LOGISTIC_MIXED, rng)
    th = make_theta(ModelKind.LOGISTIC_MIXED, rng)
    samples = draw_weighted_alphas(ModelKind.LOGISTIC_MIXED, g, th, 128, rng)
    grad = fisher_gradient(ModelKind.LOGISTIC_MIXED, g, th, samples)
    hess = louis_hessian(ModelKind.LOGISTIC_MIXED, g, th, samples, grad)
    np.testing.assert_array_equal(hess, hess.T)


def test_estimates_match_lmm_closed_forms_within_bands(rng):
    """The LMM has exact derivatives, so the weighted estimates must land within
    3 delta-method standard errors of them entry by entry."""
    g = make_group(ModelKind.LINEAR_MIXED, rng)
    th = make_theta(ModelKind.LINEAR_MIXED, rng)
    samples = draw_weighted_alphas(ModelKind.LINEAR_MIXED, g, th, 20000, np.random.default_rng(42))
    grad = fisher_gradient(ModelKind.LINEAR_MIXED, g, th, samples)
    hess = louis_hessian(ModelKind.LINEAR_MIXED, g, th, samples, grad)

    grads = joint_grad(ModelKind.LINEAR_MIXED, g, samples.alphas, th)
    hessians = joint_hessian(ModelKind.LINEAR_MIXED, g, samples.alphas, th)
    w = samples.norm_weights
    se_g = weighted_se(grads, w)
    # Hessian estimate = weighted mean of (g g^T + H) minus ghat ghat^T; band the mean part
    vals = np.einsum("sd,se->sde", grads, grads) + hessians
    se_h = weighted_se(vals, w)

    z_g = np.abs(grad - lmm_exact_grad(g, th)) / np.maximum(se_g, 1e-12)
    z_h = np.abs(hess - lmm_exact_hessian(g, th)) / np.maximum(se_h, 1e-12)
    assert float(z_g.max()) < 3.0, f"gradient z-scores {z_g}"
    assert float(z_h.max()) < 3.0, f"hessian max z-score {z_h.max():.2f}"


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.value)
def test_batch_matches_looped_estimates(model, rng):
    """The block alpha draw consumes the stream like sequential calls, so the
    batched path must reproduce the per-theta estimator at every draw."""
    g = make_group(model, rng)
    lay = model.layout(g.n_fixed)
    thetas = np.column_stack(
        [rng.standard_normal((6, g.n_fixed)), rng.uniform(-1.5, 0.5, (6, len(model.variance_names)))]
    )

    grads_b, hess_b, ess_b = batch_grad_hess(model, g, thetas, 50, np.random.default_rng(9))
    rng_loop = np.random.default_rng(9)
    for k in range(thetas.shape[0]):
        est = grad_hess_estimate(model, g, Theta(values=thetas[k], layout=lay), 50, rng_loop)
        np.testing.assert_allclose(grads_b[k], est.grad, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(hess_b[k], est.hessian, rtol=1e-10, atol=1e-12)
        assert ess_b[k] == pytest.approx(est.ess, rel=1e-10)


def test_batch_is_deterministic_and_chunk_invariant(rng):
    g = make_group(ModelKind.LOGISTIC_MIXED, rng)
    thetas = np.column_stack([rng.standard_normal((10, g.n_fixed)), rng.uniform(-1, 0.5, (10, 1))])
    a = batch_grad_hess(ModelKind.LOGISTIC_MIXED, g, thetas, 33, np.random.default_rng(2))
    b = batch_grad_hess(ModelKind.LOGISTIC_MIXED, g, thetas, 33, np.random.default_rng(2))
    c = batch_grad_hess(
        ModelKind.LOGISTIC_MIXED, g, thetas, 33, np.random.default_rng(2), chunk_rows=3
    )
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    for x, y in zip(a, c):
        np.testing.assert_array_equal(x, y)


def test_batch_input_validation(rng):
    g = make_group(ModelKind.LOGISTIC_MIXED, rng)
    with pytest.raises(ValueError):
        batch_grad_hess(ModelKind.LOGISTIC_MIXED, g, np.zeros(4), 10, rng)
    with pytest.raises(ValueError):
        batch_grad_hess(ModelKind.LOGISTIC_MIXED, g, np.zeros((3, 7)), 10, rng)
    with pytest.raises(ValueError):
        batch_grad_hess(ModelKind.LOGISTIC_MIXED, g, np.zeros((3, 4)), 0, rng)
    with pytest.raises(ValueError):
        draw_weighted_alphas(ModelKind.LOGISTIC_MIXED, g, make_theta(ModelKind.LOGISTIC_MIXED, rng), 0, rng)
