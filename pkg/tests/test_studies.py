"""Ordering and sample-size study bookkeeping."""

from __future__ import annotations

import numpy as np
import pytest

from rvgal import (
    DerivMode,
    RvgalConfig,
    default_prior,
    reorder,
    run_ordering_study,
    run_sample_size_study,
    rvgal_fit,
    simulate_lmm,
)


@pytest.fixture(scope="module")
def tiny():
    # small enough that a dozen fits stay under a second
    ds = simulate_lmm(n_groups=6, n_per_group=5, seed=11)
    prior = default_prior(ds.model, ds.n_fixed)
    cfg = RvgalConfig(s_theta=12, s_alpha=10, n_temp=2, k_steps=3, seed=0)
    return ds, prior, cfg


# ---------------------------------------------------------------------------
# Ordering study.


def test_ordering_study_run_layout(tiny):
    ds, prior, cfg = tiny
    res = run_ordering_study(ds, prior, cfg, n_orderings=3)

    assert len(res.runs) == 6
    assert res.param_names == ds.model.layout(ds.n_fixed).param_names()
    seeds = sorted({r.ordering_seed for r in res.runs})
    assert seeds == [cfg.seed + 1, cfg.seed + 2, cfg.seed + 3]
    for seed in seeds:
        flags = sorted(r.tempered for r in res.runs if r.ordering_seed == seed)
        assert flags == [False, True]
    assert all(r.fit_seed == r.ordering_seed for r in res.runs)

    d = len(res.param_names)
    for tempered in (True, False):
        s = res.spread(tempered)
        assert s.shape == (d,)
        assert np.all(s >= 0.0)

    doc = res.summary_dict()
    assert doc["spec_version"] == 1
    assert doc["n_orderings"] == 3
    assert len(doc["tempered_spread"]) == d
    assert len(doc["tempered_smaller"]) == d
    assert all(isinstance(b, bool) for b in doc["tempered_smaller"])


def test_ordering_study_matches_documented_recipe(tiny):
    # the untempered run for ordering o is exactly a plain fit of the data
    # shuffled with seed cfg.seed + o, using that same seed
    ds, prior, cfg = tiny
    res = run_ordering_study(ds, prior, cfg, n_orderings=1)

    shuffled = reorder(ds, shuffle_seed=cfg.seed + 1)
    plain_cfg = RvgalConfig(
        s_theta=cfg.s_theta, s_alpha=cfg.s_alpha, n_temp=0,
        k_steps=cfg.k_steps, seed=cfg.seed + 1,
    )
    direct = rvgal_fit(ds.model, shuffled, prior, plain_cfg, DerivMode.ESTIMATED)

    (untempered,) = [r for r in res.runs if not r.tempered]
    np.testing.assert_array_equal(untempered.final_mean, direct.final_state.mean)

    (tempered,) = [r for r in res.runs if r.tempered]
    assert not np.array_equal(tempered.final_mean, untempered.final_mean)


def test_ordering_study_single_ordering_has_zero_spread(tiny):
    ds, prior, cfg = tiny
    res = run_ordering_study(ds, prior, cfg, n_orderings=1)
    np.testing.assert_array_equal(res.spread(True), 0.0)
    np.testing.assert_array_equal(res.spread(False), 0.0)


def test_ordering_study_is_deterministic(tiny):
    ds, prior, cfg = tiny
    a = run_ordering_study(ds, prior, cfg, n_orderings=2)
    b = run_ordering_study(ds, prior, cfg, n_orderings=2)
    for ra, rb in zip(a.runs, b.runs):
        assert (ra.ordering_seed, ra.tempered) == (rb.ordering_seed, rb.tempered)
        np.testing.assert_array_equal(ra.final_mean, rb.final_mean)


def test_ordering_study_validation(tiny):
    ds, prior, cfg = tiny
    with pytest.raises(ValueError, match="at least 1 ordering"):
        run_ordering_study(ds, prior, cfg, n_orderings=0)
    flat = RvgalConfig(s_theta=12, s_alpha=10, n_temp=0, seed=0)
    with pytest.raises(ValueError, match="n_temp"):
        run_ordering_study(ds, prior, flat, n_orderings=2)


# ---------------------------------------------------------------------------
# Sample-size study.


def test_sample_size_study_grid_and_variance(tiny):
    ds, prior, cfg = tiny
    # counts below ~(12, 10) leave too little curvature signal on six small
    # groups and some repeat seeds lose positive definiteness at step one
    res = run_sample_size_study(
        ds, prior, cfg, cells=[(12, 10), (20, 16)], repeats=3
    )
    assert len(res.cells) == 2
    d = len(res.param_names)

    cell = res.cell(12, 10)
    assert cell.repeats == 3
    assert cell.final_means.shape == (3, d)
    var = cell.variance()
    assert var.shape == (d,)
    # distinct repeat seeds give genuinely different fits
    assert np.all(var > 0.0)

    with pytest.raises(KeyError):
        res.cell(999, 999)

    doc = res.summary_dict()
    assert doc["spec_version"] == 1
    assert [c["repeats"] for c in doc["cells"]] == [3, 3]
    assert len(doc["cells"][0]["variance_of_final_means"]) == d


def test_sample_size_study_single_repeat_has_no_variance(tiny):
    ds, prior, cfg = tiny
    res = run_sample_size_study(ds, prior, cfg, cells=[(12, 10)], repeats=1)
    cell = res.cell(12, 10)
    assert cell.repeats == 1
    assert cell.variance() is None
    assert res.summary_dict()["cells"][0]["variance_of_final_means"] is None


def test_sample_size_study_repeats_share_seed_sequence(tiny):
    # repeat r of every cell runs at seed base + r, so a repeated grid cell
    # reproduces itself exactly
    ds, prior, cfg = tiny
    a = run_sample_size_study(ds, prior, cfg, cells=[(12, 10)], repeats=2)
    b = run_sample_size_study(
        ds, prior, cfg, cells=[(12, 10), (12, 10)], repeats=2
    )
    np.testing.assert_array_equal(
        a.cell(12, 10).final_means, b.cells[0].final_means
    )
    np.testing.assert_array_equal(
        b.cells[0].final_means, b.cells[1].final_means
    )

    direct_cfg = RvgalConfig(
        s_theta=12, s_alpha=10, n_temp=cfg.n_temp, k_steps=cfg.k_steps,
        seed=cfg.seed + 1,
    )
    direct = rvgal_fit(ds.model, ds, prior, direct_cfg, DerivMode.ESTIMATED)
    np.testing.assert_array_equal(
        a.cell(12, 10).final_means[1], direct.final_state.mean
    )


def test_sample_size_study_validation(tiny):
    ds, prior, cfg = tiny
    with pytest.raises(ValueError, match="repeats"):
        run_sample_size_study(ds, prior, cfg, cells=[(12, 10)], repeats=0)
    with pytest.raises(ValueError, match="at least one"):
        run_sample_size_study(ds, prior, cfg, cells=[], repeats=2)
