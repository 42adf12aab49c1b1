"""Mixed models with one scalar random effect per group.

Two families are supported: a linear mixed model (Gaussian response) and a
logistic mixed model (Bernoulli response). For group ``i`` with design matrix
``X_i`` (n_i x p), loading vector ``z_i`` (n_i,), and random effect
``alpha_i ~ N(0, sigma_alpha^2)``, the linear predictor is
``eta_i = X_i beta + z_i alpha_i``. Variance parameters live on the log scale
so the parameter vector ``theta`` is unconstrained:

- linear mixed:   theta = (beta, phi_alpha, phi_eps), with
  ``sigma_alpha^2 = exp(phi_alpha)`` and noise variance
  ``sigma_eps^2 = exp(phi_eps)``;
- logistic mixed: theta = (beta, phi_tau), with
  ``tau^2 = exp(phi_tau)`` the random-intercept variance.

The module provides the per-group marginal log-likelihood of the linear model
(the random effect integrates out in closed form) together with its exact
gradient and Hessian, and for both families the joint log-density
``log p(y_i, alpha_i | theta)`` with first and second derivatives in theta.
The joint-density API is what the importance-sampling estimators consume; it
is written so a model with vector random effects could be added behind the
same functions without touching the estimator layer.

Alpha arguments are scalar-or-vector polymorphic: passing an array of draws
evaluates all of them in one vectorized call and prepends the sample axis to
the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

__all__ = [
    "ModelKind",
    "ThetaLayout",
    "Theta",
    "GroupData",
    "lmm_partial_loglik",
    "lmm_exact_grad",
    "lmm_exact_hessian",
    "conditional_loglik",
    "alpha_prior_logpdf",
    "joint_loglik",
    "joint_grad",
    "joint_hessian",
    "sample_alpha_prior",
]

LOG_2PI = math.log(2.0 * math.pi)


class ModelKind(Enum):
    """Supported response families."""

    LINEAR_MIXED = "lmm"
    LOGISTIC_MIXED = "logistic"

    @property
    def variance_names(self) -> tuple[str, ...]:
        if self is ModelKind.LINEAR_MIXED:
            return ("phi_alpha", "phi_eps")
        return ("phi_tau",)

    def layout(self, n_fixed: int) -> "ThetaLayout":
        """Parameter layout for this family with ``n_fixed`` fixed effects."""
        return ThetaLayout(n_fixed=n_fixed, variance_names=self.variance_names)


@dataclass(frozen=True)
class ThetaLayout:
    """Positions of the blocks inside the unconstrained parameter vector.

    Fixed effects occupy ``values[:n_fixed]``; the named log-variance entries
    follow in declaration order.
    """

    n_fixed: int
    variance_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.n_fixed < 0:
            raise ValueError(f"n_fixed must be nonnegative, got {self.n_fixed}")
        if len(set(self.variance_names)) != len(self.variance_names):
            raise ValueError(f"duplicate variance names: {self.variance_names}")
        if self.dim < 1:
            raise ValueError("layout must have at least one parameter")

    @property
    def dim(self) -> int:
        return self.n_fixed + len(self.variance_names)

    def variance_index(self, name: str) -> int:
        """Index of a named log-variance entry in the full vector."""
        try:
            return self.n_fixed + self.variance_names.index(name)
        except ValueError:
            raise KeyError(
                f"unknown variance name {name!r}; have {self.variance_names}"
            ) from None

    def param_names(self) -> list[str]:
        return [f"beta_{k}" for k in range(self.n_fixed)] + list(self.variance_names)


@dataclass
class Theta:
    """Unconstrained parameter vector tied to its layout."""

    values: np.ndarray
    layout: ThetaLayout

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.dim:
            raise ValueError(
                f"theta has shape {self.values.shape}, layout wants ({self.layout.dim},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("theta contains non-finite entries")

    @classmethod
    def from_parts(cls, model: ModelKind, beta, log_variances) -> "Theta":
        """Assemble from a fixed-effect block and log-variances in layout order."""
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        logv = np.atleast_1d(np.asarray(log_variances, dtype=float))
        layout = model.layout(beta.shape[0])
        if logv.shape[0] != len(layout.variance_names):
            raise ValueError(
                f"{model.value} expects {len(layout.variance_names)} log-variances, "
                f"got {logv.shape[0]}"
            )
        return cls(values=np.concatenate([beta, logv]), layout=layout)

    @property
    def beta(self) -> np.ndarray:
        return self.values[: self.layout.n_fixed]

    def variance_value(self, name: str) -> float:
        return float(self.values[self.layout.variance_index(name)])


@dataclass
class GroupData:
    """Observations for one group: responses, design matrix, loading vector."""

    group_id: int | str
    y: np.ndarray
    X: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if self.y.ndim != 1:
            raise ValueError(f"y must be 1-d, got shape {self.y.shape}")
        n = self.y.shape[0]
        if n < 1:
            raise ValueError("group must contain at least one observation")
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise ValueError(
                f"X must have shape ({n}, p), got {self.X.shape}"
            )
        if self.z.shape != (n,):
            raise ValueError(f"z must have shape ({n},), got {self.z.shape}")
        for name, arr in (("y", self.y), ("X", self.X), ("z", self.z)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"group {self.group_id}: non-finite entries in {name}")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]


def _check_group_theta(model: ModelKind, group: GroupData, theta: Theta) -> None:
    expected = model.variance_names
    if theta.layout.variance_names != expected:
        raise ValueError(
            f"theta layout {theta.layout.variance_names} does not match "
            f"{model.value} (wants {expected})"
        )
    if theta.layout.n_fixed != group.n_fixed:
        raise ValueError(
            f"theta has {theta.layout.n_fixed} fixed effects, "
            f"group {group.group_id} design has {group.n_fixed} columns"
        )


def _require_binary(group: GroupData) -> None:
    if not np.all((group.y == 0.0) | (group.y == 1.0)):
        raise ValueError(
            f"group {group.group_id}: logistic responses must be 0/1"
        )


# ---------------------------------------------------------------------------
# Linear mixed model: marginal (alpha integrated out) quantities.


def _lmm_marginal_cov(group: GroupData, theta: Theta) -> np.ndarray:
    """Marginal covariance exp(phi_alpha) z z^T + exp(phi_eps) I."""
    va = math.exp(theta.variance_value("phi_alpha"))
    ve = math.exp(theta.variance_value("phi_eps"))
    n = group.n
    return va * np.outer(group.z, group.z) + ve * np.eye(n)


def lmm_partial_loglik(group: GroupData, theta: Theta) -> float:
    """Marginal Gaussian log-likelihood of one group under the linear model.

    With ``Sigma = exp(phi_alpha) z z^T + exp(phi_eps) I`` and residual
    ``r = y - X beta``, this is the log-density of ``N(X beta, Sigma)`` at
    ``y``. The n x n system is solved through a symmetric positive-definite
    factorization; group sizes are small, so no low-rank shortcut is taken.
    """
    _check_group_theta(ModelKind.LINEAR_MIXED, group, theta)
    sigma = _lmm_marginal_cov(group, theta)
    factor = cho_factor(sigma, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    r = group.y - group.X @ theta.beta
    quad = float(r @ cho_solve(factor, r))
    return -0.5 * (group.n * LOG_2PI + logdet + quad)


def lmm_exact_grad(group: GroupData, theta: Theta) -> np.ndarray:
    """Exact gradient of :func:`lmm_partial_loglik` in theta.

    The beta block is ``X^T Sigma^{-1} r``; each log-variance entry follows
    the standard Gaussian identity
    ``-0.5 tr(Sigma^{-1} dSigma) + 0.5 r^T Sigma^{-1} dSigma Sigma^{-1} r``
    with ``dSigma`` the derivative of the marginal covariance in that entry.
    """
    _check_group_theta(ModelKind.LINEAR_MIXED, group, theta)
    n = group.n
    sigma = _lmm_marginal_cov(group, theta)
    factor = cho_factor(sigma, lower=True)
    sigma_inv = cho_solve(factor, np.eye(n))
    r = group.y - group.X @ theta.beta
    u = sigma_inv @ r

    va = math.exp(theta.variance_value("phi_alpha"))
    ve = math.exp(theta.variance_value("phi_eps"))
    d_alpha = va * np.outer(group.z, group.z)
    d_eps = ve * np.eye(n)

    g_beta = group.X.T @ u
    g_pa = -0.5 * float(np.trace(sigma_inv @ d_alpha)) + 0.5 * float(u @ d_alpha @ u)
    g_pe = -0.5 * float(np.trace(sigma_inv @ d_eps)) + 0.5 * float(u @ d_eps @ u)
    return np.concatenate([g_beta, [g_pa, g_pe]])


def lmm_exact_hessian(group: GroupData, theta: Theta) -> np.ndarray:
    """Exact Hessian of :func:`lmm_partial_loglik` in theta.

    Because both covariance derivatives are proportional to the covariance
    pieces themselves on the log scale, second derivatives of Sigma equal the
    first derivatives, which the trace terms below use. Blocks:

    - beta/beta:            -X^T Sigma^{-1} X
    - beta/log-variance:    -X^T Sigma^{-1} dSigma Sigma^{-1} r
    - log-variance pair (a, b), with S = Sigma^{-1}:
        -0.5 tr(-S dSa S dSb + S d2ab)
        +0.5 r^T (-S dSa S dSb S - S dSb S dSa S + S d2ab S) r
      where d2ab, the second covariance derivative, equals dSa when a == b
      and vanishes otherwise.
    """
    _check_group_theta(ModelKind.LINEAR_MIXED, group, theta)
    n = group.n
    p = group.n_fixed
    sigma = _lmm_marginal_cov(group, theta)
    factor = cho_factor(sigma, lower=True)
    S = cho_solve(factor, np.eye(n))
    r = group.y - group.X @ theta.beta

    va = math.exp(theta.variance_value("phi_alpha"))
    ve = math.exp(theta.variance_value("phi_eps"))
    dA = va * np.outer(group.z, group.z)
    dB = ve * np.eye(n)

    SX = S @ group.X
    Sr = S @ r

    def diag_block(dM: np.ndarray) -> float:
        SM = S @ dM
        G = -SM @ SM + SM
        H = (-2.0 * SM @ SM + SM) @ S
        return -0.5 * float(np.trace(G)) + 0.5 * float(r @ H @ r)

    def cross_block(dMa: np.ndarray, dMb: np.ndarray) -> float:
        SMa = S @ dMa
        SMb = S @ dMb
        G = -SMa @ SMb
        H = (-SMa @ SMb - SMb @ SMa) @ S
        return -0.5 * float(np.trace(G)) + 0.5 * float(r @ H @ r)

    hess = np.empty((p + 2, p + 2))
    bb = -group.X.T @ SX
    hess[:p, :p] = 0.5 * (bb + bb.T)  # X^T S X is symmetric only up to rounding
    hess[:p, p] = hess[p, :p] = -group.X.T @ S @ dA @ Sr
    hess[:p, p + 1] = hess[p + 1, :p] = -group.X.T @ S @ dB @ Sr
    hess[p, p] = diag_block(dA)
    hess[p + 1, p + 1] = diag_block(dB)
    hess[p, p + 1] = hess[p + 1, p] = cross_block(dA, dB)
    return hess


# ---------------------------------------------------------------------------
# Joint density log p(y_i, alpha_i | theta) and derivatives, both families.


def _alpha_scale_index(model: ModelKind, layout: ThetaLayout) -> int:
    # both families keep the random-effect log-variance right after beta
    return layout.n_fixed


def conditional_loglik(model: ModelKind, group: GroupData, alpha, theta: Theta):
    """Log-likelihood of the group's responses given the random effect.

    Linear family: Gaussian with mean ``X beta + z alpha`` and variance
    ``exp(phi_eps) I``. Logistic family: sum of Bernoulli log-masses with
    success probability ``expit(X beta + z alpha)``, evaluated as
    ``y eta - log(1 + exp(eta))`` through ``logaddexp`` so that large
    predictors do not overflow.
    """
    _check_group_theta(model, group, theta)
    alphas, scalar = _as_alpha_array(alpha)
    if model is ModelKind.LINEAR_MIXED:
        out = _lmm_cond_loglik(group, alphas, theta)
    else:
        _require_binary(group)
        out = _logistic_cond_loglik(group, alphas, theta)
    return float(out[0]) if scalar else out


def alpha_prior_logpdf(model: ModelKind, alpha, theta: Theta):
    """Log-density of the random-effect prior N(0, exp(phi)) at alpha."""
    alphas, scalar = _as_alpha_array(alpha)
    phi = float(theta.values[_alpha_scale_index(model, theta.layout)])
    out = -0.5 * LOG_2PI - 0.5 * phi - 0.5 * alphas**2 * math.exp(-phi)
    return float(out[0]) if scalar else out


def joint_loglik(model: ModelKind, group: GroupData, alpha, theta: Theta):
    """log p(y_i, alpha | theta): conditional likelihood plus alpha prior."""
    cond = conditional_loglik(model, group, alpha, theta)
    prior = alpha_prior_logpdf(model, alpha, theta)
    return cond + prior


def joint_grad(model: ModelKind, group: GroupData, alpha, theta: Theta):
    """Gradient of the joint log-density in theta, at fixed alpha.

    Scalar alpha gives shape (d,); a vector of m draws gives (m, d).
    """
    _check_group_theta(model, group, theta)
    alphas, scalar = _as_alpha_array(alpha)
    if model is ModelKind.LINEAR_MIXED:
        out = _lmm_joint_grad(group, alphas, theta)
    else:
        _require_binary(group)
        out = _logistic_joint_grad(group, alphas, theta)
    return out[0] if scalar else out


def joint_hessian(model: ModelKind, group: GroupData, alpha, theta: Theta):
    """Hessian of the joint log-density in theta, at fixed alpha.

    Scalar alpha gives shape (d, d); a vector of m draws gives (m, d, d).
    """
    _check_group_theta(model, group, theta)
    alphas, scalar = _as_alpha_array(alpha)
    if model is ModelKind.LINEAR_MIXED:
        out = _lmm_joint_hessian(group, alphas, theta)
    else:
        _require_binary(group)
        out = _logistic_joint_hessian(group, alphas, theta)
    return out[0] if scalar else out


def sample_alpha_prior(
    model: ModelKind, theta: Theta, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` i.i.d. random effects from N(0, exp(phi))."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    phi = float(theta.values[_alpha_scale_index(model, theta.layout)])
    return math.exp(0.5 * phi) * rng.standard_normal(count)


def _as_alpha_array(alpha) -> tuple[np.ndarray, bool]:
    arr = np.asarray(alpha, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1), True
    if arr.ndim != 1:
        raise ValueError(f"alpha must be scalar or 1-d, got shape {arr.shape}")
    return arr, False


# -- linear family kernels (vectorized over alpha draws) --------------------


def _lmm_cond_loglik(group: GroupData, alphas: np.ndarray, theta: Theta) -> np.ndarray:
    pe = theta.variance_value("phi_eps")
    r0 = group.y - group.X @ theta.beta
    # ||y - X beta - alpha z||^2 expanded in alpha, no (m, n) residual matrix
    q = (
        float(r0 @ r0)
        - 2.0 * alphas * float(r0 @ group.z)
        + alphas**2 * float(group.z @ group.z)
    )
    return -0.5 * group.n * (LOG_2PI + pe) - 0.5 * q * math.exp(-pe)


def _lmm_joint_grad(group: GroupData, alphas: np.ndarray, theta: Theta) -> np.ndarray:
    p = group.n_fixed
    pa = theta.variance_value("phi_alpha")
    pe = theta.variance_value("phi_eps")
    inv_ve = math.exp(-pe)
    r0 = group.y - group.X @ theta.beta

    Xt_r0 = group.X.T @ r0
    Xt_z = group.X.T @ group.z
    rz = float(r0 @ group.z)
    r0sq = float(r0 @ r0)
    zz = float(group.z @ group.z)
    q = r0sq - 2.0 * alphas * rz + alphas**2 * zz

    m = alphas.shape[0]
    out = np.empty((m, p + 2))
    out[:, :p] = inv_ve * (Xt_r0[None, :] - alphas[:, None] * Xt_z[None, :])
    out[:, p] = -0.5 + 0.5 * alphas**2 * math.exp(-pa)
    out[:, p + 1] = -0.5 * group.n + 0.5 * q * inv_ve
    return out


def _lmm_joint_hessian(group: GroupData, alphas: np.ndarray, theta: Theta) -> np.ndarray:
    p = group.n_fixed
    pa = theta.variance_value("phi_alpha")
    pe = theta.variance_value("phi_eps")
    inv_ve = math.exp(-pe)
    r0 = group.y - group.X @ theta.beta

    Xt_r0 = group.X.T @ r0
    Xt_z = group.X.T @ group.z
    rz = float(r0 @ group.z)
    r0sq = float(r0 @ r0)
    zz = float(group.z @ group.z)
    q = r0sq - 2.0 * alphas * rz + alphas**2 * zz

    m = alphas.shape[0]
    out = np.zeros((m, p + 2, p + 2))
    out[:, :p, :p] = -inv_ve * (group.X.T @ group.X)[None, :, :]
    # beta/phi_eps: minus the beta gradient; beta/phi_alpha vanishes
    cross = -inv_ve * (Xt_r0[None, :] - alphas[:, None] * Xt_z[None, :])
    out[:, :p, p + 1] = cross
    out[:, p + 1, :p] = cross
    out[:, p, p] = -0.5 * alphas**2 * math.exp(-pa)
    out[:, p + 1, p + 1] = -0.5 * q * inv_ve
    return out


# -- logistic family kernels -------------------------------------------------


def _logistic_eta(group: GroupData, alphas: np.ndarray, theta: Theta) -> np.ndarray:
    eta0 = group.X @ theta.beta
    return eta0[None, :] + alphas[:, None] * group.z[None, :]


def _logistic_cond_loglik(
    group: GroupData, alphas: np.ndarray, theta: Theta
) -> np.ndarray:
    eta = _logistic_eta(group, alphas, theta)
    return eta @ group.y - np.logaddexp(0.0, eta).sum(axis=1)


def _logistic_joint_grad(
    group: GroupData, alphas: np.ndarray, theta: Theta
) -> np.ndarray:
    p = group.n_fixed
    pt = theta.variance_value("phi_tau")
    eta = _logistic_eta(group, alphas, theta)
    pi = expit(eta)

    m = alphas.shape[0]
    out = np.empty((m, p + 1))
    out[:, :p] = (group.y[None, :] - pi) @ group.X
    out[:, p] = -0.5 + 0.5 * alphas**2 * math.exp(-pt)
    return out


def _logistic_joint_hessian(
    group: GroupData, alphas: np.ndarray, theta: Theta
) -> np.ndarray:
    p = group.n_fixed
    pt = theta.variance_value("phi_tau")
    eta = _logistic_eta(group, alphas, theta)
    # pi (1 - pi) as a product of sigmoids, stable for |eta| large
    v = expit(eta) * expit(-eta)

    m = alphas.shape[0]
    out = np.zeros((m, p + 1, p + 1))
    bb = np.einsum("mn,np,nq->mpq", v, group.X, group.X)
    # einsum stages its contraction, so mirror to keep each draw exactly symmetric
    out[:, :p, :p] = -0.5 * (bb + bb.transpose(0, 2, 1))
    out[:, p, p] = -0.5 * alphas**2 * math.exp(-pt)
    return out
