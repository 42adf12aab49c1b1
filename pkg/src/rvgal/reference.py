"""Validation oracle: quadrature posterior, MCMC sampler, comparison metrics.

The recursion in :mod:`rvgal.recursion` is a single-pass approximation, so
the package carries an independent route to the same posterior for checking
it: the per-group likelihood is integrated over the latent effect with
Gauss-Hermite quadrature (or in closed form for the linear model), summed
into a log-posterior, and sampled with an adaptive random-walk
Metropolis chain. :func:`compare_gaussian_vs_samples` then reduces the two
posteriors to standardized mean gaps, standard-deviation ratios, and a
symmetric KL divergence.

:func:`full_log_posterior` is the readable per-group definition.
:func:`make_log_posterior` builds an equivalent evaluator that stacks all
groups into one tensor expression; the chain calls that one, since it
evaluates the posterior tens of thousands of times. Both routes are tested
against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .models import (
    LOG_2PI,
    GroupData,
    ModelKind,
    Theta,
    conditional_loglik,
    lmm_partial_loglik,
)

__all__ = [
    "QuadratureRule",
    "gauss_hermite",
    "quadrature_partial_loglik",
    "full_log_posterior",
    "make_log_posterior",
    "McmcOutput",
    "rwm_sample",
    "gaussian_kl",
    "symmetric_gaussian_kl",
    "ComparisonReport",
    "compare_gaussian_vs_samples",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and weights for integrals against exp(-x^2)."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return self.nodes.shape[0]


def gauss_hermite(order: int) -> QuadratureRule:
    """Rule of the given order; weights sum to sqrt(pi), nodes are symmetric."""
    if not 1 <= order <= 200:
        raise ValueError(f"order must be in [1, 200], got {order}")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    return QuadratureRule(nodes=nodes, weights=weights)


def quadrature_partial_loglik(
    model: ModelKind, group: GroupData, theta: Theta, rule: QuadratureRule
) -> float:
    """log p(y_i | theta) by integrating the latent effect out numerically.

    Substituting alpha = sqrt(2) sigma u turns the integral of the
    conditional likelihood against the N(0, sigma^2) prior into a standard
    Gauss-Hermite sum with an overall 1/sqrt(pi); the sum is taken in log
    space.
    """
    phi = float(theta.values[theta.layout.n_fixed])
    sigma = math.exp(0.5 * phi)
    alphas = math.sqrt(2.0) * sigma * rule.nodes
    logs = conditional_loglik(model, group, alphas, theta)
    return float(logsumexp(logs + np.log(rule.weights))) - 0.5 * math.log(math.pi)


def full_log_posterior(
    model: ModelKind,
    groups,
    prior_mean: np.ndarray,
    prior_cov: np.ndarray,
    theta: Theta,
    rule: QuadratureRule | None = None,
) -> float:
    """Unnormalized posterior log-density: likelihood sum plus Gaussian prior.

    With ``rule=None`` the linear model's closed-form marginal is used (the
    logistic model has none and requires a rule). The evidence term is the
    only piece left out, so with no groups this is exactly the prior
    log-density.
    """
    group_list = getattr(groups, "groups", groups)
    if rule is None:
        if model is not ModelKind.LINEAR_MIXED:
            raise ValueError(
                "closed-form marginal exists for the linear model only; "
                "pass a quadrature rule"
            )
        loglik = sum(lmm_partial_loglik(g, theta) for g in group_list)
    else:
        loglik = sum(
            quadrature_partial_loglik(model, g, theta, rule) for g in group_list
        )
    prior = multivariate_normal.logpdf(theta.values, mean=prior_mean, cov=prior_cov)
    return float(loglik + prior)


class _StackedGroups:
    """Equal-size groups stacked into (N, n) / (N, n, p) arrays."""

    def __init__(self, groups: list[GroupData]):
        self.y = np.stack([g.y for g in groups])
        self.X = np.stack([g.X for g in groups])
        self.z = np.stack([g.z for g in groups])
        self.n = self.y.shape[1]
        self.z_sq = np.einsum("in,in->i", self.z, self.z)

    @classmethod
    def build(cls, groups: list[GroupData]) -> "_StackedGroups | None":
        sizes = {g.n for g in groups}
        widths = {g.n_fixed for g in groups}
        if len(sizes) != 1 or len(widths) != 1:
            return None
        return cls(groups)


def make_log_posterior(
    model: ModelKind,
    groups,
    prior_mean: np.ndarray,
    prior_cov: np.ndarray,
    rule: QuadratureRule | None = None,
):
    """Build a fast ``theta_values -> log posterior`` callable.

    Same value as :func:`full_log_posterior` (the callable takes the raw
    parameter vector). Equal-size groups are evaluated in one stacked
    expression; for the linear branch the marginal covariance is a rank-one
    update of a scaled identity, so its determinant and inverse are written
    out directly instead of factoring each group. Ragged data falls back to
    the per-group sum.
    """
    group_list = list(getattr(groups, "groups", groups))
    if not group_list:
        raise ValueError("need at least one group")
    layout = model.layout(group_list[0].n_fixed)
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_cov = np.asarray(prior_cov, dtype=float)
    prior_dist = multivariate_normal(mean=prior_mean, cov=prior_cov)
    if rule is None and model is not ModelKind.LINEAR_MIXED:
        raise ValueError(
            "closed-form marginal exists for the linear model only; pass a rule"
        )

    stacked = _StackedGroups.build(group_list)
    p = layout.n_fixed

    if stacked is None:
        def log_post(values: np.ndarray) -> float:
            theta = Theta(values=np.asarray(values, dtype=float), layout=layout)
            return full_log_posterior(
                model, group_list, prior_mean, prior_cov, theta, rule
            )

        return log_post

    if rule is None:

        def log_post(values: np.ndarray) -> float:
            values = np.asarray(values, dtype=float)
            va = math.exp(values[p])
            ve = math.exp(values[p + 1])
            r = stacked.y - stacked.X @ values[:p]            # (N, n)
            rz = np.einsum("in,in->i", r, stacked.z)
            r_sq = np.einsum("in,in->i", r, r)
            denom = ve + va * stacked.z_sq
            logdet = (stacked.n - 1) * math.log(ve) + np.log(denom)
            quad = (r_sq - va * rz**2 / denom) / ve
            loglik = -0.5 * float(
                np.sum(stacked.n * LOG_2PI + logdet + quad)
            )
            return loglik + float(prior_dist.logpdf(values))

        return log_post

    log_wts = np.log(rule.weights)
    nodes = rule.nodes
    half_log_pi = 0.5 * math.log(math.pi)

    if model is ModelKind.LINEAR_MIXED:

        def node_logliks(values: np.ndarray) -> np.ndarray:
            ve = math.exp(values[p + 1])
            sigma = math.exp(0.5 * values[p])
            alphas = math.sqrt(2.0) * sigma * nodes                   # (K,)
            r0 = stacked.y - stacked.X @ values[:p]                   # (N, n)
            rz = np.einsum("in,in->i", r0, stacked.z)
            r_sq = np.einsum("in,in->i", r0, r0)
            q = (
                r_sq[:, None]
                - 2.0 * rz[:, None] * alphas[None, :]
                + stacked.z_sq[:, None] * alphas[None, :] ** 2
            )                                                         # (N, K)
            return -0.5 * stacked.n * (LOG_2PI + values[p + 1]) - 0.5 * q / ve

    else:

        def node_logliks(values: np.ndarray) -> np.ndarray:
            sigma = math.exp(0.5 * values[p])
            alphas = math.sqrt(2.0) * sigma * nodes
            eta0 = stacked.X @ values[:p]                             # (N, n)
            eta = eta0[:, None, :] + alphas[None, :, None] * stacked.z[:, None, :]
            y_eta = np.einsum("ikn,in->ik", eta, stacked.y)
            return y_eta - np.logaddexp(0.0, eta).sum(axis=2)         # (N, K)

    def log_post(values: np.ndarray) -> float:
        values = np.asarray(values, dtype=float)
        per_group = logsumexp(node_logliks(values) + log_wts[None, :], axis=1)
        loglik = float(np.sum(per_group - half_log_pi))
        return loglik + float(prior_dist.logpdf(values))

    return log_post


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis.


@dataclass
class McmcOutput:
    """Post-burn-in draws plus the acceptance rate over the kept phase."""

    draws: np.ndarray
    acceptance_rate: float
    n_burnin: int


def rwm_sample(
    log_target,
    init,
    n_iter: int,
    n_burnin: int,
    rng: np.random.Generator,
    target_accept: float = 0.234,
) -> McmcOutput:
    """Random-walk Metropolis with burn-in-only proposal adaptation.

    The proposal is N(0, s^2 C). During burn-in, C tracks the running sample
    covariance of the history (refreshed periodically, with a small ridge)
    and log s^2 follows a stochastic-approximation update toward the target
    acceptance rate; both freeze when burn-in ends, so the kept draws come
    from a fixed-kernel chain. Draws are stored after burn-in only.
    """
    x = np.array(
        init.values if isinstance(init, Theta) else init, dtype=float
    ).copy()
    d = x.shape[0]
    if not 0 <= n_burnin < n_iter:
        raise ValueError(f"need 0 <= n_burnin < n_iter, got {n_burnin}, {n_iter}")
    lp = float(log_target(x))
    if not math.isfinite(lp):
        raise ValueError("log target is not finite at the initial point")

    log_s = math.log(2.38 / math.sqrt(d))
    chol = np.eye(d)
    history = np.empty((n_burnin, d)) if n_burnin else None
    refresh = 200

    kept = np.empty((n_iter - n_burnin, d))
    accepted_kept = 0

    for t in range(n_iter):
        step = math.exp(log_s) * (chol @ rng.standard_normal(d))
        prop = x + step
        lp_prop = float(log_target(prop))
        log_ratio = lp_prop - lp
        accept_prob = math.exp(min(0.0, log_ratio))
        if rng.random() < accept_prob:
            x, lp = prop, lp_prop
            if t >= n_burnin:
                accepted_kept += 1

        if t < n_burnin:
            history[t] = x
            log_s += (t + 1) ** -0.6 * (accept_prob - target_accept)
            if (t + 1) % refresh == 0 and t + 1 >= 10 * d:
                cov = np.cov(history[: t + 1].T)
                cov = np.atleast_2d(cov) + 1e-9 * np.eye(d)
                chol = np.linalg.cholesky(cov)
        else:
            kept[t - n_burnin] = x

    return McmcOutput(
        draws=kept,
        acceptance_rate=accepted_kept / kept.shape[0],
        n_burnin=n_burnin,
    )


# ---------------------------------------------------------------------------
# Gaussian comparison metrics.


def gaussian_kl(mean0, cov0, mean1, cov1) -> float:
    """KL(N0 || N1) between two full-covariance Gaussians."""
    mean0 = np.asarray(mean0, dtype=float)
    mean1 = np.asarray(mean1, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    d = mean0.shape[0]
    l1 = np.linalg.cholesky(cov1)
    # trace(Sigma1^{-1} Sigma0) via whitening: tr(L1^{-1} Sigma0 L1^{-T})
    solved = np.linalg.solve(l1, np.linalg.solve(l1, cov0).T)
    trace_term = float(np.trace(solved))
    diff = mean1 - mean0
    w = np.linalg.solve(l1, diff)
    maha = float(w @ w)
    logdet0 = 2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(cov0)))))
    logdet1 = 2.0 * float(np.sum(np.log(np.diag(l1))))
    return 0.5 * (trace_term + maha - d + logdet1 - logdet0)


def symmetric_gaussian_kl(mean0, cov0, mean1, cov1) -> float:
    """Jeffreys divergence KL(N0 || N1) + KL(N1 || N0)."""
    return gaussian_kl(mean0, cov0, mean1, cov1) + gaussian_kl(
        mean1, cov1, mean0, cov0
    )


@dataclass
class ComparisonReport:
    """Per-parameter agreement metrics between a Gaussian fit and MCMC draws."""

    param_names: list[str]
    gaussian_mean: np.ndarray
    gaussian_sd: np.ndarray
    mcmc_mean: np.ndarray
    mcmc_sd: np.ndarray
    standardized_mean_gap: np.ndarray
    sd_ratio: np.ndarray
    symmetric_kl: float
    n_draws: int

    def to_dict(self) -> dict:
        return {
            "spec_version": 1,
            "param_names": list(self.param_names),
            "gaussian_mean": [float(v) for v in self.gaussian_mean],
            "gaussian_sd": [float(v) for v in self.gaussian_sd],
            "mcmc_mean": [float(v) for v in self.mcmc_mean],
            "mcmc_sd": [float(v) for v in self.mcmc_sd],
            "standardized_mean_gap": [float(v) for v in self.standardized_mean_gap],
            "sd_ratio": [float(v) for v in self.sd_ratio],
            "symmetric_kl": float(self.symmetric_kl),
            "n_draws": self.n_draws,
        }


def compare_gaussian_vs_samples(
    state, mcmc: McmcOutput, param_names: list[str] | None = None
) -> ComparisonReport:
    """Reduce a Gaussian approximation and an MCMC sample to agreement metrics.

    ``state`` needs ``mean`` and ``covariance()``. Gaps are in units of the
    MCMC standard deviation; the symmetric KL moment-matches a Gaussian to
    the draws first.
    """
    draws = np.asarray(mcmc.draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 100:
        raise ValueError(
            f"need at least 100 draws of matching dimension, got shape {draws.shape}"
        )
    mean_q = np.asarray(state.mean, dtype=float)
    cov_q = np.asarray(state.covariance(), dtype=float)
    if draws.shape[1] != mean_q.shape[0]:
        raise ValueError(
            f"draws have dimension {draws.shape[1]}, state has {mean_q.shape[0]}"
        )
    mean_mc = draws.mean(axis=0)
    cov_mc = np.atleast_2d(np.cov(draws.T, ddof=1))  # np.cov collapses d=1 to 0-d
    sd_mc = np.sqrt(np.diag(cov_mc))
    sd_q = np.sqrt(np.diag(cov_q))
    if param_names is None:
        param_names = [f"theta_{k}" for k in range(mean_q.shape[0])]
    return ComparisonReport(
        param_names=list(param_names),
        gaussian_mean=mean_q,
        gaussian_sd=sd_q,
        mcmc_mean=mean_mc,
        mcmc_sd=sd_mc,
        standardized_mean_gap=np.abs(mean_q - mean_mc) / sd_mc,
        sd_ratio=sd_q / sd_mc,
        symmetric_kl=symmetric_gaussian_kl(mean_q, cov_q, mean_mc, cov_mc),
        n_draws=draws.shape[0],
    )
