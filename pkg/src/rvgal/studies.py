"""Repeated-fit studies: ordering sensitivity and sample-size sensitivity.

A single-pass recursion is not exchangeable in the group order, and its
Monte Carlo noise depends on the per-step sample counts, so two studies ship
with the package:

- the ordering study refits the same data under random group orders, with
  and without tempering, and measures the spread of the final means;
- the sample-size study refits over a grid of (theta draws, alpha draws)
  cells with repeated seeds and reports the per-parameter variance of the
  final means in each cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset, reorder
from .recursion import DerivMode, RvgalConfig, VariationalState, rvgal_fit

__all__ = [
    "OrderingRun",
    "OrderingStudyResult",
    "run_ordering_study",
    "SampleSizeCell",
    "SampleSizeStudyResult",
    "run_sample_size_study",
]


@dataclass
class OrderingRun:
    """Final mean of one fit in the ordering study."""

    ordering_seed: int
    tempered: bool
    fit_seed: int
    final_mean: np.ndarray


@dataclass
class OrderingStudyResult:
    runs: list[OrderingRun]
    param_names: list[str]

    def spread(self, tempered: bool) -> np.ndarray:
        """Per-parameter max-minus-min of the final means across orderings."""
        means = np.stack([r.final_mean for r in self.runs if r.tempered == tempered])
        return means.max(axis=0) - means.min(axis=0)

    def summary_dict(self) -> dict:
        tempered = self.spread(True)
        plain = self.spread(False)
        return {
            "spec_version": 1,
            "param_names": list(self.param_names),
            "n_orderings": len({r.ordering_seed for r in self.runs}),
            "tempered_spread": [float(v) for v in tempered],
            "untempered_spread": [float(v) for v in plain],
            "tempered_smaller": [bool(t < u) for t, u in zip(tempered, plain)],
        }


def run_ordering_study(
    dataset: Dataset,
    prior: VariationalState,
    cfg: RvgalConfig,
    n_orderings: int = 10,
    deriv_mode: DerivMode = DerivMode.ESTIMATED,
) -> OrderingStudyResult:
    """Fit tempered and untempered variants across shuffled group orders.

    Ordering o (1-based) shuffles with seed ``cfg.seed + o`` and both of its
    fits run with that same seed, so each tempered/untempered pair differs
    only in the tempering schedule. The untempered variant sets n_temp to 0;
    the tempered variant uses the schedule from ``cfg``.
    """
    if n_orderings < 1:
        raise ValueError(f"need at least 1 ordering, got {n_orderings}")
    if cfg.n_temp < 1:
        raise ValueError("cfg.n_temp must be >= 1 for the tempered variant")
    runs: list[OrderingRun] = []
    param_names: list[str] = []
    for o in range(1, n_orderings + 1):
        ordering_seed = cfg.seed + o
        shuffled = reorder(dataset, shuffle_seed=ordering_seed)
        for tempered in (True, False):
            fit_cfg = RvgalConfig(
                s_theta=cfg.s_theta,
                s_alpha=cfg.s_alpha,
                n_temp=cfg.n_temp if tempered else 0,
                k_steps=cfg.k_steps,
                jitter_base=cfg.jitter_base,
                jitter_max_tries=cfg.jitter_max_tries,
                seed=ordering_seed,
            )
            trace = rvgal_fit(dataset.model, shuffled, prior, fit_cfg, deriv_mode)
            param_names = trace.param_names
            runs.append(
                OrderingRun(
                    ordering_seed=ordering_seed,
                    tempered=tempered,
                    fit_seed=ordering_seed,
                    final_mean=trace.final_state.mean.copy(),
                )
            )
    return OrderingStudyResult(runs=runs, param_names=param_names)


@dataclass
class SampleSizeCell:
    """Repeated fits at one (s_theta, s_alpha) setting."""

    s_theta: int
    s_alpha: int
    final_means: np.ndarray  # (repeats, d)

    @property
    def repeats(self) -> int:
        return self.final_means.shape[0]

    def variance(self) -> np.ndarray | None:
        """Per-parameter variance across repeats; absent with one repeat."""
        if self.repeats < 2:
            return None
        return self.final_means.var(axis=0, ddof=1)


@dataclass
class SampleSizeStudyResult:
    cells: list[SampleSizeCell]
    param_names: list[str]

    def cell(self, s_theta: int, s_alpha: int) -> SampleSizeCell:
        for c in self.cells:
            if c.s_theta == s_theta and c.s_alpha == s_alpha:
                return c
        raise KeyError(f"no cell ({s_theta}, {s_alpha})")

    def summary_dict(self) -> dict:
        out = []
        for c in self.cells:
            var = c.variance()
            out.append(
                {
                    "s_theta": c.s_theta,
                    "s_alpha": c.s_alpha,
                    "repeats": c.repeats,
                    "mean_of_final_means": [
                        float(v) for v in c.final_means.mean(axis=0)
                    ],
                    "variance_of_final_means": None
                    if var is None
                    else [float(v) for v in var],
                }
            )
        return {
            "spec_version": 1,
            "param_names": list(self.param_names),
            "cells": out,
        }


def run_sample_size_study(
    dataset: Dataset,
    prior: VariationalState,
    base_cfg: RvgalConfig,
    cells: list[tuple[int, int]],
    repeats: int = 10,
    deriv_mode: DerivMode = DerivMode.ESTIMATED,
) -> SampleSizeStudyResult:
    """Refit each (s_theta, s_alpha) cell ``repeats`` times on fixed data.

    Repeat r of every cell uses seed ``base_cfg.seed + r`` so cells see the
    same seed sequence and differ only in their sample counts.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if not cells:
        raise ValueError("need at least one (s_theta, s_alpha) cell")
    out: list[SampleSizeCell] = []
    param_names: list[str] = []
    for s_theta, s_alpha in cells:
        means = []
        for r in range(repeats):
            cfg = RvgalConfig(
                s_theta=s_theta,
                s_alpha=s_alpha,
                n_temp=base_cfg.n_temp,
                k_steps=base_cfg.k_steps,
                jitter_base=base_cfg.jitter_base,
                jitter_max_tries=base_cfg.jitter_max_tries,
                seed=base_cfg.seed + r,
            )
            trace = rvgal_fit(dataset.model, dataset, prior, cfg, deriv_mode)
            param_names = trace.param_names
            means.append(trace.final_state.mean.copy())
        out.append(
            SampleSizeCell(
                s_theta=s_theta, s_alpha=s_alpha, final_means=np.stack(means)
            )
        )
    return SampleSizeStudyResult(cells=out, param_names=param_names)
