"""One-pass Gaussian variational recursion over groups.

The posterior over theta is approximated by a Gaussian that is updated once
per group, in order. Writing P for the covariance of the current approximation
q and E_q for the expectation under it, the update after seeing group i is

    P_i^{-1} = P_{i-1}^{-1} - E_q[ Hessian estimate of log p(y_i | theta) ]
    mu_i     = mu_{i-1}     + P_i  E_q[ gradient estimate of log p(y_i | theta) ]

with both expectations taken by Monte Carlo over theta draws from q_{i-1}.
The precision is updated first so the mean shift uses the new covariance.

Early groups can destabilize the recursion because q is still close to the
prior; the tempered variant splits group i's contribution into K equal parts
and applies them through K sub-steps, re-drawing theta from the partially
updated approximation each time. A constant-Hessian model makes the K
sub-steps telescope to exactly the plain update, which is the basis of the
conjugate exactness tests.

The state stores the lower Cholesky factor L of the precision, so the
covariance never has to be formed during fitting: theta draws solve
L^T x = xi and the mean shift solves with L twice. If a Hessian update makes
the precision indefinite, growing diagonal jitter is applied a bounded number
of times before the fit aborts with the failing group index.

``model`` arguments accept a :class:`~rvgal.models.ModelKind` (routed to the
importance-sampling estimators, or to the closed-form linear-model
derivatives in exact mode) or any object providing either
``expected_grad_hess(group, state, cfg, rng)`` for models whose q-expectation
is available in closed form, or ``batch_grad_hess(group, thetas, s_alpha,
rng)`` for Monte Carlo evaluation at theta draws.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import estimators
from .models import GroupData, ModelKind, Theta, lmm_exact_grad, lmm_exact_hessian

__all__ = [
    "DerivMode",
    "VariationalState",
    "RvgalConfig",
    "IterationRecord",
    "SubstepRecord",
    "FitTrace",
    "PrecisionNotPositiveDefiniteError",
    "default_prior",
    "expected_grad_hess",
    "rvgal_step",
    "rvgal_tempered_step",
    "rvgal_fit",
]


class DerivMode(Enum):
    """How per-group derivatives are obtained."""

    ESTIMATED = "estimated"
    EXACT_LMM = "exact"


class PrecisionNotPositiveDefiniteError(RuntimeError):
    """Precision update left the factorization unrepairable by jitter.

    Carries the 1-based index of the failing group; when raised out of
    :func:`rvgal_fit`, ``partial_trace`` holds the trace up to the failure.
    """

    def __init__(self, iteration: int):
        super().__init__(
            f"precision not positive definite at group {iteration} "
            "after exhausting jitter attempts"
        )
        self.iteration = iteration
        self.partial_trace: FitTrace | None = None


@dataclass
class VariationalState:
    """Gaussian approximation N(mean, (L L^T)^{-1}) with L = prec_chol."""

    mean: np.ndarray
    prec_chol: np.ndarray
    iteration: int = 0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.prec_chol = np.asarray(self.prec_chol, dtype=float)
        d = self.mean.shape[0]
        if self.mean.ndim != 1:
            raise ValueError(f"mean must be 1-d, got shape {self.mean.shape}")
        if self.prec_chol.shape != (d, d):
            raise ValueError(
                f"prec_chol must be ({d}, {d}), got {self.prec_chol.shape}"
            )
        if np.any(np.diag(self.prec_chol) <= 0.0):
            raise ValueError("prec_chol must have a strictly positive diagonal")

    @classmethod
    def from_mean_precision(
        cls, mean, precision, iteration: int = 0
    ) -> "VariationalState":
        precision = np.asarray(precision, dtype=float)
        return cls(
            mean=np.asarray(mean, dtype=float),
            prec_chol=np.linalg.cholesky(precision),
            iteration=iteration,
        )

    @classmethod
    def from_mean_cov(cls, mean, cov, iteration: int = 0) -> "VariationalState":
        cov = np.asarray(cov, dtype=float)
        lc = np.linalg.cholesky(cov)
        inv_lc = solve_triangular(lc, np.eye(cov.shape[0]), lower=True)
        precision = inv_lc.T @ inv_lc
        return cls.from_mean_precision(mean, 0.5 * (precision + precision.T), iteration)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def precision(self) -> np.ndarray:
        return self.prec_chol @ self.prec_chol.T

    def covariance(self) -> np.ndarray:
        inv_l = solve_triangular(self.prec_chol, np.eye(self.dim), lower=True)
        return inv_l.T @ inv_l

    @property
    def logdet_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.prec_chol))))

    def sample_thetas(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``count`` theta vectors from the approximation, shape (count, d)."""
        xi = rng.standard_normal((count, self.dim))
        dev = solve_triangular(self.prec_chol, xi.T, trans="T", lower=True)
        return self.mean[None, :] + dev.T


@dataclass
class RvgalConfig:
    """Tuning knobs for the recursion.

    ``s_theta`` theta draws approximate the q-expectation; each draw uses
    ``s_alpha`` importance samples for the latent effect. The first
    ``n_temp`` groups are processed through ``k_steps`` tempered sub-steps.
    Jitter settings bound the repair attempts when a precision update loses
    definiteness.
    """

    s_theta: int = 100
    s_alpha: int = 100
    n_temp: int = 10
    k_steps: int = 4
    jitter_base: float = 1e-8
    jitter_max_tries: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.s_theta < 1:
            raise ValueError(f"s_theta must be >= 1, got {self.s_theta}")
        if self.s_alpha < 1:
            raise ValueError(f"s_alpha must be >= 1, got {self.s_alpha}")
        if self.n_temp < 0:
            raise ValueError(f"n_temp must be >= 0, got {self.n_temp}")
        if self.k_steps < 1:
            raise ValueError(f"k_steps must be >= 1, got {self.k_steps}")
        if not self.jitter_base > 0.0:
            raise ValueError(f"jitter_base must be positive, got {self.jitter_base}")
        if self.jitter_max_tries < 0:
            raise ValueError(
                f"jitter_max_tries must be >= 0, got {self.jitter_max_tries}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return {
            "s_theta": self.s_theta,
            "s_alpha": self.s_alpha,
            "n_temp": self.n_temp,
            "k_steps": self.k_steps,
            "jitter_base": self.jitter_base,
            "jitter_max_tries": self.jitter_max_tries,
            "seed": self.seed,
        }


@dataclass
class IterationRecord:
    """State snapshot after one group's update."""

    iteration: int
    mean: np.ndarray
    logdet_precision: float
    min_ess: float
    jitter_count: int
    elapsed_seconds: float


@dataclass
class SubstepRecord:
    """Snapshot after one tempered sub-step (recorded on request)."""

    iteration: int
    substep: int
    mean: np.ndarray
    logdet_precision: float
    min_ess: float
    jitter_count: int


@dataclass
class FitTrace:
    """Per-group records plus the final state and the configuration echo."""

    records: list[IterationRecord]
    substep_records: list[SubstepRecord]
    final_state: VariationalState
    config: RvgalConfig
    model_label: str
    deriv_mode: str
    param_names: list[str] = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        """Write one row per iteration (substep 0) and per kept sub-step."""
        d = self.final_state.dim
        header = (
            ["iteration", "substep"]
            + [f"mu_{k}" for k in range(d)]
            + ["logdet_precision", "min_ess", "jitter_count", "elapsed_ms"]
        )
        rows: list[list] = []
        for rec in self.records:
            rows.append(
                [rec.iteration, 0]
                + [repr(float(v)) for v in rec.mean]
                + [
                    repr(rec.logdet_precision),
                    repr(rec.min_ess),
                    rec.jitter_count,
                    repr(rec.elapsed_seconds * 1e3),
                ]
            )
        for sub in self.substep_records:
            rows.append(
                [sub.iteration, sub.substep]
                + [repr(float(v)) for v in sub.mean]
                + [repr(sub.logdet_precision), repr(sub.min_ess), sub.jitter_count, ""]
            )
        rows.sort(key=lambda row: (row[0], row[1]))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)

    def summary_dict(self) -> dict:
        cov = self.final_state.covariance()
        tril = cov[np.tril_indices(self.final_state.dim)]
        ess_values = [r.min_ess for r in self.records if math.isfinite(r.min_ess)]
        return {
            "spec_version": 1,
            "model": self.model_label,
            "deriv_mode": self.deriv_mode,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "n_groups": self.n_iterations,
            "param_names": list(self.param_names),
            "final_mean": [float(v) for v in self.final_state.mean],
            "final_covariance_lower_triangle": [float(v) for v in tril],
            "min_ess_overall": min(ess_values) if ess_values else None,
            "jitter_events_total": sum(r.jitter_count for r in self.records),
            "runtime_seconds": sum(r.elapsed_seconds for r in self.records),
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary_dict(), fh, indent=2)
            fh.write("\n")


def default_prior(
    model: ModelKind,
    n_fixed: int,
    phi_mean: float | Sequence[float] = math.log(0.25),
    beta_variance: float = 10.0,
    phi_variance: float = 1.0,
) -> VariationalState:
    """Diffuse Gaussian prior: beta ~ N(0, beta_variance I), each
    log-variance ~ N(phi_mean, phi_variance)."""
    n_var = len(model.variance_names)
    phi_mean = np.broadcast_to(np.asarray(phi_mean, dtype=float), (n_var,))
    mean = np.concatenate([np.zeros(n_fixed), phi_mean])
    prec_diag = np.concatenate(
        [np.full(n_fixed, 1.0 / beta_variance), np.full(n_var, 1.0 / phi_variance)]
    )
    return VariationalState(mean=mean, prec_chol=np.diag(np.sqrt(prec_diag)))


# ---------------------------------------------------------------------------


def expected_grad_hess(
    model,
    group: GroupData,
    state: VariationalState,
    cfg: RvgalConfig,
    rng: np.random.Generator,
    deriv_mode: DerivMode = DerivMode.ESTIMATED,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Monte Carlo q-expectation of the per-group gradient and Hessian.

    Returns ``(grad, hess, min_ess)``: equally weighted averages over
    ``cfg.s_theta`` theta draws (the Hessian average symmetrized), and the
    smallest importance-sampling ESS seen across the draws (NaN when the
    derivatives are exact and no weighting happens).
    """
    if hasattr(model, "expected_grad_hess"):
        grad, hess, min_ess = model.expected_grad_hess(group, state, cfg, rng)
        return np.asarray(grad, dtype=float), np.asarray(hess, dtype=float), min_ess

    thetas = state.sample_thetas(cfg.s_theta, rng)
    if deriv_mode is DerivMode.EXACT_LMM:
        if model is not ModelKind.LINEAR_MIXED:
            raise ValueError("exact derivative mode applies to the linear model only")
        layout = model.layout(group.n_fixed)
        grads = np.empty_like(thetas)
        hessians = np.empty((cfg.s_theta, state.dim, state.dim))
        for l in range(cfg.s_theta):
            th = Theta(values=thetas[l], layout=layout)
            grads[l] = lmm_exact_grad(group, th)
            hessians[l] = lmm_exact_hessian(group, th)
        ess = np.full(cfg.s_theta, np.nan)
    elif isinstance(model, ModelKind):
        grads, hessians, ess = estimators.batch_grad_hess(
            model, group, thetas, cfg.s_alpha, rng
        )
    else:
        grads, hessians, ess = model.batch_grad_hess(group, thetas, cfg.s_alpha, rng)

    grad = grads.mean(axis=0)
    hess = hessians.mean(axis=0)
    hess = 0.5 * (hess + hess.T)
    return grad, hess, float(np.min(ess))


def _factor_with_jitter(
    precision: np.ndarray, cfg: RvgalConfig, iteration: int
) -> tuple[np.ndarray, int]:
    try:
        return np.linalg.cholesky(precision), 0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.abs(np.diag(precision))))
    if not scale > 0.0:
        scale = 1.0
    eye = np.eye(precision.shape[0])
    for t in range(cfg.jitter_max_tries):
        try:
            bumped = precision + cfg.jitter_base * scale * 10.0**t * eye
            return np.linalg.cholesky(bumped), t + 1
        except np.linalg.LinAlgError:
            continue
    raise PrecisionNotPositiveDefiniteError(iteration)


def _substep(
    model,
    group: GroupData,
    state: VariationalState,
    cfg: RvgalConfig,
    rng: np.random.Generator,
    deriv_mode: DerivMode,
    scale: float,
    iteration: int,
) -> tuple[VariationalState, float, int]:
    """Apply one (possibly fractional) update; precision first, then mean."""
    grad, hess, min_ess = expected_grad_hess(model, group, state, cfg, rng, deriv_mode)
    precision = state.precision() - scale * hess
    precision = 0.5 * (precision + precision.T)
    chol, jitter_count = _factor_with_jitter(precision, cfg, iteration)
    shift = solve_triangular(
        chol.T, solve_triangular(chol, grad, lower=True), lower=False
    )
    new_mean = state.mean + scale * shift
    new_state = VariationalState(
        mean=new_mean, prec_chol=chol, iteration=state.iteration
    )
    return new_state, min_ess, jitter_count


def rvgal_step(
    model,
    group: GroupData,
    state: VariationalState,
    cfg: RvgalConfig,
    rng: np.random.Generator,
    deriv_mode: DerivMode = DerivMode.ESTIMATED,
) -> VariationalState:
    """Process one group with a single full-weight update."""
    new_state, _, _ = _substep(
        model, group, state, cfg, rng, deriv_mode, 1.0, state.iteration + 1
    )
    return replace(new_state, iteration=state.iteration + 1)


def rvgal_tempered_step(
    model,
    group: GroupData,
    state: VariationalState,
    cfg: RvgalConfig,
    rng: np.random.Generator,
    deriv_mode: DerivMode = DerivMode.ESTIMATED,
    collect_substeps: list[SubstepRecord] | None = None,
) -> VariationalState:
    """Process one group through ``cfg.k_steps`` equal fractional updates.

    Each sub-step re-draws theta from the current partial approximation and
    scales both the gradient and the Hessian contribution by 1/k_steps.
    With ``k_steps=1`` this performs exactly the plain step.
    """
    scale = 1.0 / cfg.k_steps
    iteration = state.iteration + 1
    current = state
    for k in range(1, cfg.k_steps + 1):
        current, min_ess, jitter_count = _substep(
            model, group, current, cfg, rng, deriv_mode, scale, iteration
        )
        if collect_substeps is not None:
            collect_substeps.append(
                SubstepRecord(
                    iteration=iteration,
                    substep=k,
                    mean=current.mean.copy(),
                    logdet_precision=current.logdet_precision,
                    min_ess=min_ess,
                    jitter_count=jitter_count,
                )
            )
    return replace(current, iteration=iteration)


def rvgal_fit(
    model,
    data,
    prior: VariationalState,
    cfg: RvgalConfig,
    deriv_mode: DerivMode = DerivMode.ESTIMATED,
    rng: np.random.Generator | None = None,
    record_substeps: bool = False,
) -> FitTrace:
    """Run the recursion over all groups in order.

    ``data`` is a sequence of :class:`~rvgal.models.GroupData` or any object
    with a ``groups`` attribute. Group i (1-based, counting from
    ``prior.iteration``) gets the tempered treatment while i <= cfg.n_temp.
    Passing ``rng`` continues an existing stream, which is how a fit split
    into segments reproduces the single-pass result bit for bit; by default
    a fresh generator is seeded from ``cfg.seed``.

    On a positive-definiteness failure the raised error carries the partial
    trace accumulated so far.
    """
    groups: Sequence[GroupData] = getattr(data, "groups", data)
    if len(groups) == 0:
        raise ValueError("data contains no groups")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    if isinstance(model, ModelKind):
        layout = model.layout(groups[0].n_fixed)
        if prior.dim != layout.dim:
            raise ValueError(
                f"prior dimension {prior.dim} does not match model dimension {layout.dim}"
            )
        param_names = layout.param_names()
        model_label = model.value
    else:
        param_names = [f"theta_{k}" for k in range(prior.dim)]
        model_label = type(model).__name__

    mode_label = deriv_mode.value if isinstance(deriv_mode, DerivMode) else str(deriv_mode)
    records: list[IterationRecord] = []
    substep_records: list[SubstepRecord] = []
    state = prior

    for group in groups:
        iteration = state.iteration + 1
        started = time.perf_counter()
        try:
            if iteration <= cfg.n_temp:
                subs: list[SubstepRecord] = []
                state = rvgal_tempered_step(
                    model, group, state, cfg, rng, deriv_mode, subs
                )
                min_ess = min(s.min_ess for s in subs)
                jitter_count = sum(s.jitter_count for s in subs)
                if record_substeps:
                    substep_records.extend(subs)
            else:
                new_state, min_ess, jitter_count = _substep(
                    model, group, state, cfg, rng, deriv_mode, 1.0, iteration
                )
                state = replace(new_state, iteration=iteration)
        except PrecisionNotPositiveDefiniteError as err:
            err.partial_trace = FitTrace(
                records=records,
                substep_records=substep_records,
                final_state=state,
                config=cfg,
                model_label=model_label,
                deriv_mode=mode_label,
                param_names=param_names,
            )
            raise
        elapsed = time.perf_counter() - started
        records.append(
            IterationRecord(
                iteration=iteration,
                mean=state.mean.copy(),
                logdet_precision=state.logdet_precision,
                min_ess=min_ess,
                jitter_count=jitter_count,
                elapsed_seconds=elapsed,
            )
        )

    return FitTrace(
        records=records,
        substep_records=substep_records,
        final_state=state,
        config=cfg,
        model_label=model_label,
        deriv_mode=mode_label,
        param_names=param_names,
    )
