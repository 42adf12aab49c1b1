"""Command-line workflows around the library.

Six subcommands cover the full loop: ``simulate`` writes grouped data,
``fit`` runs the one-pass recursion, ``reference`` samples the same
posterior by MCMC, ``compare`` scores the two against each other, and
``study-ordering`` / ``study-samples`` run the repeated-fit studies. Every
command writes its artifacts under ``--out`` and echoes its effective
configuration and seed into them, so a run is reproducible from its outputs
alone. Failures print a JSON object to stderr; a fit whose precision update
cannot be repaired exits with code 2 and reports the failing group index.

Settings may come from a JSON document (``--config``), from flags (flags
win), or from per-command defaults. Defaults follow the simulation studies
the package reproduces: 100 theta draws and 100 latent draws per step,
tempering over the first 10 groups with 4 sub-steps, and a diffuse prior
centered at log 0.25 on the log-variances. The binary-panel schemas
(``sixcity``, ``polypharmacy``) switch to 200 draws and a log-variance prior
mean of 1, matching the heavier real-data setting.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .datasets import (
    Dataset,
    GenericSchema,
    StudyConfig,
    load_grouped_csv,
    simulate_lmm,
    simulate_logistic,
    write_grouped_csv,
)
from .models import ModelKind
from .recursion import (
    DerivMode,
    PrecisionNotPositiveDefiniteError,
    RvgalConfig,
    VariationalState,
    default_prior,
    rvgal_fit,
)
from .reference import (
    compare_gaussian_vs_samples,
    gauss_hermite,
    make_log_posterior,
    McmcOutput,
    rwm_sample,
)
from .studies import run_ordering_study, run_sample_size_study

_REAL_SCHEMAS = ("sixcity", "polypharmacy")
_DEFAULT_PHI_MEAN = math.log(0.25)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rvgal",
        description="One-pass variational Gaussian fitting for mixed models, "
        "with an MCMC reference oracle.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON settings document")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--s", type=int, dest="s_theta", help="theta draws per step")
    fitting.add_argument("--s-alpha", type=int, help="latent draws per theta draw")
    fitting.add_argument("--n-temp", type=int, help="groups receiving tempered steps")
    fitting.add_argument("--k-steps", type=int, help="sub-steps per tempered group")
    fitting.add_argument(
        "--deriv",
        choices=[m.value for m in DerivMode],
        help="derivative source (exact applies to the linear model only)",
    )

    data_in = argparse.ArgumentParser(add_help=False)
    data_in.add_argument("--data", type=Path, help="grouped CSV input")
    data_in.add_argument(
        "--schema",
        choices=["generic", *_REAL_SCHEMAS],
        default="generic",
        help="CSV schema (generic infers covariate columns from the header)",
    )
    data_in.add_argument(
        "--model", choices=[m.value for m in ModelKind], help="model family"
    )

    prior_flags = argparse.ArgumentParser(add_help=False)
    prior_flags.add_argument(
        "--prior-phi-mean", type=float, help="prior mean of the log-variances"
    )
    prior_flags.add_argument(
        "--prior-beta-variance", type=float, help="prior variance of each fixed effect"
    )
    prior_flags.add_argument(
        "--prior-phi-variance", type=float, help="prior variance of each log-variance"
    )

    p_sim = sub.add_parser(
        "simulate", parents=[common], help="write simulated grouped data"
    )
    p_sim.add_argument(
        "--model", choices=[m.value for m in ModelKind], required=True
    )
    p_sim.add_argument("--n-groups", type=int)
    p_sim.add_argument("--n-per-group", type=int)
    p_sim.add_argument("--beta", type=str, help="comma-separated fixed effects")
    p_sim.add_argument("--sigma-alpha", type=float, help="linear model only")
    p_sim.add_argument("--sigma-eps", type=float, help="linear model only")
    p_sim.add_argument("--tau", type=float, help="logistic model only")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser(
        "fit",
        parents=[common, data_in, fitting, prior_flags],
        help="run the one-pass recursion over a dataset",
    )
    p_fit.set_defaults(func=cmd_fit)

    p_ref = sub.add_parser(
        "reference",
        parents=[common, data_in, prior_flags],
        help="sample the posterior with adaptive random-walk Metropolis",
    )
    p_ref.add_argument("--iters", type=int, help="total chain length")
    p_ref.add_argument("--burnin", type=int, help="adaptation/burn-in length")
    p_ref.add_argument(
        "--posterior",
        choices=["auto", "exact", "quadrature"],
        default="auto",
        help="likelihood route (auto: exact for lmm, quadrature otherwise)",
    )
    p_ref.add_argument("--quad-order", type=int, help="Gauss-Hermite order")
    p_ref.set_defaults(func=cmd_reference)

    p_cmp = sub.add_parser(
        "compare",
        parents=[common],
        help="score a fit summary against reference draws",
    )
    p_cmp.add_argument("--fit", type=Path, required=True, help="fit summary JSON")
    p_cmp.add_argument("--draws", type=Path, required=True, help="reference draws CSV")
    p_cmp.add_argument("--max-gap", type=float, default=0.5)
    p_cmp.add_argument("--sd-ratio-min", type=float, default=0.5)
    p_cmp.add_argument("--sd-ratio-max", type=float, default=2.0)
    p_cmp.set_defaults(func=cmd_compare)

    p_ord = sub.add_parser(
        "study-ordering",
        parents=[common, data_in, fitting, prior_flags],
        help="final-mean spread across group orderings, tempered vs not",
    )
    p_ord.add_argument("--orderings", type=int, default=10)
    p_ord.add_argument("--n-groups", type=int, help="simulated fallback size")
    p_ord.add_argument("--n-per-group", type=int)
    p_ord.add_argument("--data-seed", type=int, default=1)
    p_ord.set_defaults(func=cmd_study_ordering)

    p_ss = sub.add_parser(
        "study-samples",
        parents=[common, data_in, fitting, prior_flags],
        help="final-mean variance across (theta, latent) sample-count cells",
    )
    p_ss.add_argument("--s-grid", type=str, help="comma-separated theta draw counts")
    p_ss.add_argument(
        "--s-alpha-grid", type=str, help="comma-separated latent draw counts"
    )
    p_ss.add_argument(
        "--paired",
        action="store_true",
        help="zip the two grids instead of taking their product",
    )
    p_ss.add_argument("--repeats", type=int)
    p_ss.add_argument("--n-groups", type=int, help="simulated fallback size")
    p_ss.add_argument("--n-per-group", type=int)
    p_ss.add_argument("--data-seed", type=int, default=1)
    p_ss.set_defaults(func=cmd_study_samples)

    return parser


# ---------------------------------------------------------------------------
# Settings resolution.


def _load_config(args) -> StudyConfig | None:
    path = getattr(args, "config", None)
    return StudyConfig.from_json(path) if path else None


def _resolve(args, config: StudyConfig | None, attr: str, default):
    value = getattr(args, attr, None)
    if value is None and config is not None:
        value = config.get(attr)
    return default if value is None else value


def _rvgal_config(args, config: StudyConfig | None, default_s: int) -> RvgalConfig:
    return RvgalConfig(
        s_theta=_resolve(args, config, "s_theta", default_s),
        s_alpha=_resolve(args, config, "s_alpha", default_s),
        n_temp=_resolve(args, config, "n_temp", 10),
        k_steps=_resolve(args, config, "k_steps", 4),
        seed=_resolve(args, config, "seed", 0),
    )


def _infer_generic_schema(path: Path) -> GenericSchema:
    header = list(pd.read_csv(path, nrows=0).columns)
    for required in ("group_id", "response"):
        if required not in header:
            raise ValueError(f"{path}: generic schema requires a {required!r} column")
    x_cols = tuple(c for c in header if c not in ("group_id", "response", "z"))
    if not x_cols:
        raise ValueError(f"{path}: no covariate columns found")
    return GenericSchema(
        x_columns=x_cols, z_column="z" if "z" in header else None
    )


def _load_dataset(args, config: StudyConfig | None) -> Dataset:
    if args.data is None:
        raise ValueError("this command requires --data")
    if args.schema in _REAL_SCHEMAS:
        return load_grouped_csv(args.data, args.schema)
    model_name = _resolve(args, config, "model", None)
    if model_name is None:
        raise ValueError("generic schema requires --model")
    return load_grouped_csv(
        args.data, _infer_generic_schema(args.data), ModelKind(model_name)
    )


def _prior_for(args, config: StudyConfig | None, dataset: Dataset) -> VariationalState:
    real = dataset.provenance.get("schema") in _REAL_SCHEMAS
    phi_mean = _resolve(
        args, config, "prior_phi_mean", 1.0 if real else _DEFAULT_PHI_MEAN
    )
    beta_var = _resolve(args, config, "prior_beta_variance", 10.0)
    phi_var = _resolve(args, config, "prior_phi_variance", 1.0)
    return default_prior(
        dataset.model,
        dataset.n_fixed,
        phi_mean=phi_mean,
        beta_variance=beta_var,
        phi_variance=phi_var,
    )


def _default_s_for(dataset: Dataset) -> int:
    # the binary panels run with heavier sampling by default
    return 200 if dataset.provenance.get("schema") in _REAL_SCHEMAS else 100


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"wrote {path}")


def _param_names(dataset: Dataset) -> list[str]:
    layout = dataset.model.layout(dataset.n_fixed)
    return layout.param_names()


# ---------------------------------------------------------------------------
# Commands.


def cmd_simulate(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    model = ModelKind(args.model)
    seed = _resolve(args, config, "seed", 0)
    n_groups = args.n_groups
    n_per_group = args.n_per_group or 10
    beta = (
        tuple(float(v) for v in args.beta.split(","))
        if args.beta
        else (-1.5, 1.5, 0.5, 0.25)
    )
    if model is ModelKind.LINEAR_MIXED:
        dataset = simulate_lmm(
            n_groups=n_groups or 200,
            n_per_group=n_per_group,
            beta=beta,
            sigma_alpha=args.sigma_alpha if args.sigma_alpha is not None else 0.9,
            sigma_eps=args.sigma_eps if args.sigma_eps is not None else 0.7,
            seed=seed,
        )
    else:
        dataset = simulate_logistic(
            n_groups=n_groups or 500,
            n_per_group=n_per_group,
            beta=beta,
            tau=args.tau if args.tau is not None else 0.9,
            seed=seed,
        )
    data_path = out / "dataset.csv"
    write_grouped_csv(dataset, data_path)
    print(f"wrote {data_path}")
    _write_json(
        {
            "spec_version": 1,
            "provenance": dataset.provenance,
            "x_names": dataset.x_names,
            "n_groups": dataset.n_groups,
            "n_obs": dataset.n_obs,
            "files": {"dataset": data_path.name},
        },
        out / "manifest.json",
    )
    return 0


def cmd_fit(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    dataset = _load_dataset(args, config)
    deriv = DerivMode(args.deriv) if args.deriv else DerivMode.ESTIMATED
    if deriv is DerivMode.EXACT_LMM and dataset.model is not ModelKind.LINEAR_MIXED:
        raise ValueError("--deriv exact applies to the linear model only")
    cfg = _rvgal_config(args, config, _default_s_for(dataset))
    prior = _prior_for(args, config, dataset)
    trace = rvgal_fit(
        dataset.model, dataset, prior, cfg, deriv_mode=deriv, record_substeps=True
    )
    trace_path = out / "trace.csv"
    trace.to_csv(trace_path)
    print(f"wrote {trace_path}")
    summary = trace.summary_dict()
    summary["provenance"] = dataset.provenance
    _write_json(summary, out / "summary.json")
    return 0


def cmd_reference(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    dataset = _load_dataset(args, config)
    prior = _prior_for(args, config, dataset)
    n_iter = _resolve(args, config, "iters", None) or _resolve(
        args, config, "mcmc_iters", 50_000
    )
    n_burnin = _resolve(args, config, "burnin", None) or _resolve(
        args, config, "mcmc_burnin", 10_000
    )
    seed = _resolve(args, config, "seed", 0)
    quad_order = _resolve(args, config, "quad_order", 50)

    route = args.posterior
    if route == "auto":
        route = "exact" if dataset.model is ModelKind.LINEAR_MIXED else "quadrature"
    if route == "exact" and dataset.model is not ModelKind.LINEAR_MIXED:
        raise ValueError("exact posterior route applies to the linear model only")
    rule = None if route == "exact" else gauss_hermite(quad_order)

    prior_mean = prior.mean
    prior_cov = prior.covariance()
    log_post = make_log_posterior(
        dataset.model, dataset, prior_mean, prior_cov, rule=rule
    )
    rng = np.random.default_rng(seed)
    mcmc = rwm_sample(log_post, prior_mean.copy(), n_iter, n_burnin, rng)

    names = _param_names(dataset)
    draws_path = out / "draws.csv"
    pd.DataFrame(mcmc.draws, columns=names).to_csv(
        draws_path, index=False, float_format="%.17g"
    )
    print(f"wrote {draws_path}")
    _write_json(
        {
            "spec_version": 1,
            "model": dataset.model.value,
            "posterior_route": route,
            "quad_order": None if rule is None else rule.order,
            "n_iter": n_iter,
            "n_burnin": n_burnin,
            "seed": seed,
            "acceptance_rate": mcmc.acceptance_rate,
            "param_names": names,
            "provenance": dataset.provenance,
            "files": {"draws": draws_path.name},
        },
        out / "reference.json",
    )
    return 0


def _state_from_summary(summary: dict) -> VariationalState:
    mean = np.asarray(summary["final_mean"], dtype=float)
    d = mean.shape[0]
    cov = np.zeros((d, d))
    cov[np.tril_indices(d)] = summary["final_covariance_lower_triangle"]
    cov = cov + np.tril(cov, -1).T
    return VariationalState.from_mean_cov(mean, cov)


def cmd_compare(args) -> int:
    out = _out_dir(args)
    with open(args.fit) as fh:
        summary = json.load(fh)
    state = _state_from_summary(summary)
    frame = pd.read_csv(args.draws)
    names = summary.get("param_names") or list(frame.columns)
    mcmc = McmcOutput(
        draws=frame.to_numpy(dtype=float), acceptance_rate=float("nan"), n_burnin=0
    )
    report = compare_gaussian_vs_samples(state, mcmc, param_names=names)
    payload = report.to_dict()
    payload["thresholds"] = {
        "max_gap": args.max_gap,
        "sd_ratio_min": args.sd_ratio_min,
        "sd_ratio_max": args.sd_ratio_max,
    }
    gaps_ok = bool(np.all(report.standardized_mean_gap < args.max_gap))
    ratios_ok = bool(
        np.all(
            (report.sd_ratio > args.sd_ratio_min)
            & (report.sd_ratio < args.sd_ratio_max)
        )
    )
    payload["within_thresholds"] = gaps_ok and ratios_ok
    _write_json(payload, out / "report.json")
    if not (gaps_ok and ratios_ok):
        json.dump(
            {
                "error": "comparison_threshold_exceeded",
                "max_gap_seen": float(np.max(report.standardized_mean_gap)),
                "sd_ratio_range": [
                    float(np.min(report.sd_ratio)),
                    float(np.max(report.sd_ratio)),
                ],
            },
            sys.stderr,
        )
        sys.stderr.write("\n")
        return 1
    return 0


def _dataset_or_simulated(args, config: StudyConfig | None) -> Dataset:
    if args.data is not None:
        return _load_dataset(args, config)
    model_name = _resolve(args, config, "model", "logistic")
    n_groups = args.n_groups or 100
    n_per_group = args.n_per_group or 10
    if ModelKind(model_name) is ModelKind.LINEAR_MIXED:
        return simulate_lmm(
            n_groups=n_groups, n_per_group=n_per_group, seed=args.data_seed
        )
    return simulate_logistic(
        n_groups=n_groups, n_per_group=n_per_group, seed=args.data_seed
    )


def cmd_study_ordering(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    dataset = _dataset_or_simulated(args, config)
    cfg = _rvgal_config(args, config, _default_s_for(dataset))
    prior = _prior_for(args, config, dataset)
    deriv = DerivMode(args.deriv) if args.deriv else DerivMode.ESTIMATED
    result = run_ordering_study(
        dataset, prior, cfg, n_orderings=args.orderings, deriv_mode=deriv
    )

    rows = []
    for run in result.runs:
        row = {
            "ordering_seed": run.ordering_seed,
            "tempered": int(run.tempered),
            "fit_seed": run.fit_seed,
        }
        row.update(
            {f"mu_{k}": run.final_mean[k] for k in range(run.final_mean.shape[0])}
        )
        rows.append(row)
    runs_path = out / "ordering_runs.csv"
    pd.DataFrame(rows).to_csv(runs_path, index=False, float_format="%.17g")
    print(f"wrote {runs_path}")

    summary = result.summary_dict()
    summary["config"] = cfg.to_dict()
    summary["provenance"] = dataset.provenance
    _write_json(summary, out / "ordering_summary.json")
    return 0


def _parse_grid(text: str | None, default: list[int]) -> list[int]:
    if not text:
        return list(default)
    values = [int(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ValueError("empty sample-count grid")
    return values


def cmd_study_samples(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    dataset = _dataset_or_simulated(args, config)
    cfg = _rvgal_config(args, config, _default_s_for(dataset))
    prior = _prior_for(args, config, dataset)
    deriv = DerivMode(args.deriv) if args.deriv else DerivMode.ESTIMATED

    s_grid = _parse_grid(args.s_grid, [50, 100, 500, 1000])
    a_grid = _parse_grid(args.s_alpha_grid, s_grid)
    if args.paired:
        if len(s_grid) != len(a_grid):
            raise ValueError("--paired requires grids of equal length")
        cells = list(zip(s_grid, a_grid))
    else:
        cells = [(s, a) for s in s_grid for a in a_grid]
    repeats = args.repeats if args.repeats is not None else 10

    result = run_sample_size_study(
        dataset, prior, cfg, cells, repeats=repeats, deriv_mode=deriv
    )

    rows = []
    for cell in result.cells:
        for r in range(cell.repeats):
            row = {"s_theta": cell.s_theta, "s_alpha": cell.s_alpha, "repeat": r}
            row.update(
                {
                    f"mu_{k}": cell.final_means[r, k]
                    for k in range(cell.final_means.shape[1])
                }
            )
            rows.append(row)
    runs_path = out / "samples_runs.csv"
    pd.DataFrame(rows).to_csv(runs_path, index=False, float_format="%.17g")
    print(f"wrote {runs_path}")

    summary = result.summary_dict()
    summary["config"] = cfg.to_dict()
    summary["repeats"] = repeats
    summary["provenance"] = dataset.provenance
    _write_json(summary, out / "samples_summary.json")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PrecisionNotPositiveDefiniteError as err:
        json.dump(
            {
                "error": "precision_not_positive_definite",
                "iteration": err.iteration,
                "message": str(err),
            },
            sys.stderr,
        )
        sys.stderr.write("\n")
        return 2
    except (ValueError, KeyError, OSError) as err:
        json.dump(
            {"error": type(err).__name__, "message": str(err)}, sys.stderr
        )
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
