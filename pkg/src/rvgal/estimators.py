"""Importance-sampled score and Hessian estimators for the group likelihood.

The marginal per-group log-likelihood log p(y_i | theta) has no closed form
once the response is non-Gaussian, but its derivatives can be written as
posterior expectations over the latent random effect:

- gradient: the posterior mean of the joint score,
  E[ g(alpha) | y_i ] with g(alpha) = grad_theta log p(y_i, alpha | theta);
- Hessian: E[ g(alpha) g(alpha)^T + H(alpha) | y_i ] minus the outer product
  of the gradient with itself, with H(alpha) the joint Hessian.

Both expectations are estimated by self-normalized importance sampling with
the random-effect prior as proposal, so the unnormalized log-weight of a draw
is just the conditional log-likelihood of the group's responses. The same
weighted draws feed both the gradient and the Hessian; no fresh sampling
happens between the two, which keeps the pair internally consistent and is
what the single-draw exactness property below relies on.

With one draw the weight is 1 and the outer-product terms cancel exactly,
so the Hessian estimate collapses to the joint Hessian at that draw.

Estimates are consistent as the number of draws grows but, like every
self-normalized scheme, biased at finite sample size; effective sample size
(1 / sum of squared normalized weights) is reported so callers can monitor
weight degeneracy.

:func:`batch_grad_hess` evaluates the estimator at many theta draws in one
vectorized pass. Its alpha samples are drawn as one (S, s_alpha) block, which
consumes the generator stream in exactly the same order as S sequential
calls, so the batched and looped paths see identical random effects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from .models import (
    LOG_2PI,
    GroupData,
    ModelKind,
    Theta,
    alpha_prior_logpdf,
    conditional_loglik,
    joint_grad,
    joint_hessian,
    sample_alpha_prior,
)

__all__ = [
    "EstimatorDegenerateError",
    "ImportanceProposal",
    "WeightedAlphaSamples",
    "GradHessEstimate",
    "draw_weighted_alphas",
    "fisher_gradient",
    "louis_hessian",
    "grad_hess_estimate",
    "batch_grad_hess",
]


class EstimatorDegenerateError(RuntimeError):
    """Raised when every importance weight underflows to zero."""


@dataclass
class ImportanceProposal:
    """Alternative proposal for the random-effect draws.

    None ships with the package (the prior proposal is the default and the
    one exercised everywhere); the hook exists so a heavier-tailed or
    posterior-informed proposal can be slotted in without touching the
    estimator algebra. ``sample(theta, count, rng)`` returns draws and
    ``log_density(alphas, theta)`` their log-density under the proposal.
    """

    sample: Callable[[Theta, int, np.random.Generator], np.ndarray]
    log_density: Callable[[np.ndarray, Theta], np.ndarray]


@dataclass
class WeightedAlphaSamples:
    """Random-effect draws with raw and self-normalized importance weights."""

    alphas: np.ndarray
    log_weights: np.ndarray
    norm_weights: np.ndarray

    def __post_init__(self) -> None:
        m = self.alphas.shape[0]
        if self.log_weights.shape != (m,) or self.norm_weights.shape != (m,):
            raise ValueError("samples and weights must have matching lengths")

    @property
    def ess(self) -> float:
        """Effective sample size 1 / sum(w^2) of the normalized weights."""
        return 1.0 / float(self.norm_weights @ self.norm_weights)


@dataclass
class GradHessEstimate:
    """Gradient/Hessian estimate for one group at one theta, with diagnostics."""

    grad: np.ndarray
    hessian: np.ndarray
    ess: float
    s_alpha: int


def _normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    finite = np.isfinite(log_w)
    if not np.any(finite):
        raise EstimatorDegenerateError(
            "all importance weights are zero; the conditional likelihood "
            "underflowed at every draw"
        )
    shifted = np.exp(log_w - np.max(log_w[finite]))
    shifted[~finite] = 0.0
    return shifted / shifted.sum()


def draw_weighted_alphas(
    model: ModelKind,
    group: GroupData,
    theta: Theta,
    s_alpha: int,
    rng: np.random.Generator,
    proposal: ImportanceProposal | None = None,
) -> WeightedAlphaSamples:
    """Draw random effects and weight them by the conditional likelihood.

    With the default prior proposal the importance weight of a draw is
    ``p(y_i | alpha, theta)``, so the log-weights are conditional
    log-likelihood values; a custom proposal adds the prior/proposal
    log-density correction. Normalization subtracts the max log-weight
    before exponentiating.
    """
    if s_alpha < 1:
        raise ValueError(f"s_alpha must be >= 1, got {s_alpha}")
    if proposal is None:
        alphas = sample_alpha_prior(model, theta, s_alpha, rng)
        log_w = np.asarray(conditional_loglik(model, group, alphas, theta))
    else:
        alphas = np.asarray(proposal.sample(theta, s_alpha, rng), dtype=float)
        log_w = (
            np.asarray(conditional_loglik(model, group, alphas, theta))
            + alpha_prior_logpdf(model, alphas, theta)
            - np.asarray(proposal.log_density(alphas, theta), dtype=float)
        )
    return WeightedAlphaSamples(
        alphas=alphas, log_weights=log_w, norm_weights=_normalize_log_weights(log_w)
    )


def fisher_gradient(
    model: ModelKind, group: GroupData, theta: Theta, samples: WeightedAlphaSamples
) -> np.ndarray:
    """Score estimate: weighted average of joint gradients over the draws."""
    grads = joint_grad(model, group, samples.alphas, theta)
    return samples.norm_weights @ grads


def louis_hessian(
    model: ModelKind,
    group: GroupData,
    theta: Theta,
    samples: WeightedAlphaSamples,
    grad_estimate: np.ndarray,
) -> np.ndarray:
    """Hessian estimate from the same weighted draws as the gradient.

    Computes ``sum_s w_s (g_s g_s^T + H_s) - ghat ghat^T`` where g_s and H_s
    are the joint gradient and Hessian at draw s and ghat is the score
    estimate passed in. The outer-product part is evaluated in centered form,
    ``sum_s w_s (g_s - ghat)(g_s - ghat)^T``, which is the same quantity but
    avoids cancelling two large matrices; with a single draw the centered
    term is exactly zero and the estimate equals that draw's joint Hessian
    bit for bit. Reusing the caller's draws and gradient keeps the pair
    consistent. The result is symmetrized.
    """
    grad_estimate = np.asarray(grad_estimate, dtype=float)
    grads = joint_grad(model, group, samples.alphas, theta)
    hessians = joint_hessian(model, group, samples.alphas, theta)
    w = samples.norm_weights
    centered = grads - grad_estimate[None, :]
    spread = np.einsum("sd,s,se->de", centered, w, centered)
    out = 0.5 * (spread + spread.T) + np.tensordot(w, hessians, axes=(0, 0))
    return out


def grad_hess_estimate(
    model: ModelKind,
    group: GroupData,
    theta: Theta,
    s_alpha: int,
    rng: np.random.Generator,
    proposal: ImportanceProposal | None = None,
) -> GradHessEstimate:
    """Draw once, estimate both derivative orders, report the ESS."""
    samples = draw_weighted_alphas(model, group, theta, s_alpha, rng, proposal)
    grad = fisher_gradient(model, group, theta, samples)
    hess = louis_hessian(model, group, theta, samples, grad)
    return GradHessEstimate(grad=grad, hessian=hess, ess=samples.ess, s_alpha=s_alpha)


# ---------------------------------------------------------------------------
# Vectorized evaluation at a block of theta draws.


def batch_grad_hess(
    model: ModelKind,
    group: GroupData,
    thetas: np.ndarray,
    s_alpha: int,
    rng: np.random.Generator,
    chunk_rows: int = 128,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Estimate gradients and Hessians at S theta draws in one pass.

    Parameters
    ----------
    thetas : (S, d) array
        Parameter draws, fixed effects first then log-variances.
    s_alpha : int
        Importance-sample count per theta draw.
    chunk_rows : int
        Theta rows processed per block, bounding the (rows, s_alpha, n)
        temporaries.

    Returns
    -------
    grads : (S, d), hessians : (S, d, d), ess : (S,)
        Per-draw score estimates, Hessian estimates, and effective sample
        sizes. Matches the per-theta functions up to summation order.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim != 2:
        raise ValueError(f"thetas must be (S, d), got shape {thetas.shape}")
    s_theta, dim = thetas.shape
    layout = model.layout(group.n_fixed)
    if dim != layout.dim:
        raise ValueError(
            f"theta draws have dimension {dim}, {model.value} with "
            f"{group.n_fixed} fixed effects wants {layout.dim}"
        )
    if s_alpha < 1:
        raise ValueError(f"s_alpha must be >= 1, got {s_alpha}")

    p = layout.n_fixed
    # one block draw == S sequential prior draws on the same stream
    sigmas = np.exp(0.5 * thetas[:, p])
    alphas = sigmas[:, None] * rng.standard_normal((s_theta, s_alpha))

    kernel = _BATCH_KERNELS[model]
    grads = np.empty((s_theta, dim))
    hessians = np.empty((s_theta, dim, dim))
    ess = np.empty(s_theta)
    for start in range(0, s_theta, chunk_rows):
        stop = min(start + chunk_rows, s_theta)
        kernel(
            group,
            thetas[start:stop],
            alphas[start:stop],
            grads[start:stop],
            hessians[start:stop],
            ess[start:stop],
        )
    return grads, hessians, ess


def _softmax_rows(log_w: np.ndarray) -> np.ndarray:
    top = np.max(log_w, axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise EstimatorDegenerateError(
            "all importance weights are zero for at least one theta draw"
        )
    w = np.exp(log_w - top)
    w /= w.sum(axis=1, keepdims=True)
    return w


def _batch_lmm(
    group: GroupData,
    thetas: np.ndarray,
    alphas: np.ndarray,
    out_grads: np.ndarray,
    out_hess: np.ndarray,
    out_ess: np.ndarray,
) -> None:
    p = group.n_fixed
    n = group.n
    X, y, z = group.X, group.y, group.z
    beta = thetas[:, :p]
    inv_va = np.exp(-thetas[:, p])
    inv_ve = np.exp(-thetas[:, p + 1])

    r0 = y[None, :] - beta @ X.T                      # (B, n)
    rz = r0 @ z                                       # (B,)
    r0sq = np.einsum("bn,bn->b", r0, r0)
    zz = float(z @ z)
    Xt_r0 = r0 @ X                                    # (B, p)
    Xt_z = X.T @ z                                    # (p,)

    a2 = alphas**2
    q = r0sq[:, None] - 2.0 * alphas * rz[:, None] + a2 * zz        # (B, m)
    log_w = -0.5 * n * (LOG_2PI + thetas[:, p + 1])[:, None] - 0.5 * q * inv_ve[:, None]
    w = _softmax_rows(log_w)
    out_ess[:] = 1.0 / np.einsum("bm,bm->b", w, w)

    # per-draw joint gradients, assembled blockwise
    g_beta = inv_ve[:, None, None] * (
        Xt_r0[:, None, :] - alphas[:, :, None] * Xt_z[None, None, :]
    )                                                 # (B, m, p)
    g_pa = -0.5 + 0.5 * a2 * inv_va[:, None]          # (B, m)
    g_pe = -0.5 * n + 0.5 * q * inv_ve[:, None]

    G = np.concatenate([g_beta, g_pa[..., None], g_pe[..., None]], axis=2)
    ghat = np.einsum("bm,bmd->bd", w, G)
    out_grads[:] = ghat

    # centered outer-product term plus the weighted joint-Hessian blocks
    C = G - ghat[:, None, :]
    second = np.einsum("bmd,bm,bme->bde", C, w, C)
    second = 0.5 * (second + second.transpose(0, 2, 1))
    second[:, :p, :p] += -inv_ve[:, None, None] * (X.T @ X)[None, :, :]
    wg_beta = -np.einsum("bm,bmp->bp", w, g_beta)     # weighted beta/phi_eps block
    second[:, :p, p + 1] += wg_beta
    second[:, p + 1, :p] += wg_beta
    second[:, p, p] += -0.5 * np.einsum("bm,bm->b", w, a2) * inv_va
    second[:, p + 1, p + 1] += -0.5 * np.einsum("bm,bm->b", w, q) * inv_ve
    out_hess[:] = second


def _batch_logistic(
    group: GroupData,
    thetas: np.ndarray,
    alphas: np.ndarray,
    out_grads: np.ndarray,
    out_hess: np.ndarray,
    out_ess: np.ndarray,
) -> None:
    p = group.n_fixed
    X, y, z = group.X, group.y, group.z
    beta = thetas[:, :p]
    inv_vt = np.exp(-thetas[:, p])

    eta = (beta @ X.T)[:, None, :] + alphas[:, :, None] * z[None, None, :]  # (B, m, n)
    log_w = eta @ y - np.logaddexp(0.0, eta).sum(axis=2)
    w = _softmax_rows(log_w)
    out_ess[:] = 1.0 / np.einsum("bm,bm->b", w, w)

    pi = expit(eta)
    a2 = alphas**2
    g_beta = (y[None, None, :] - pi) @ X              # (B, m, p)
    g_pt = -0.5 + 0.5 * a2 * inv_vt[:, None]

    G = np.concatenate([g_beta, g_pt[..., None]], axis=2)
    ghat = np.einsum("bm,bmd->bd", w, G)
    out_grads[:] = ghat

    C = G - ghat[:, None, :]
    second = np.einsum("bmd,bm,bme->bde", C, w, C)
    second = 0.5 * (second + second.transpose(0, 2, 1))
    v_bar = np.einsum("bm,bmn->bn", w, pi * expit(-eta))
    bb = np.einsum("bn,np,nq->bpq", v_bar, X, X)
    # mirror the staged contraction so each row stays exactly symmetric
    second[:, :p, :p] += -0.5 * (bb + bb.transpose(0, 2, 1))
    second[:, p, p] += -0.5 * np.einsum("bm,bm->b", w, a2) * inv_vt
    out_hess[:] = second


_BATCH_KERNELS = {
    ModelKind.LINEAR_MIXED: _batch_lmm,
    ModelKind.LOGISTIC_MIXED: _batch_logistic,
}
