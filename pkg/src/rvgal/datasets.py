"""Dataset container, simulators, CSV loaders, and the study config document.

Grouped data travels as long-format CSV: one row per observation with a
``group_id`` column, a ``response`` column, covariate columns, and optionally
a ``z`` column for the random-effect loading (implicitly all ones when
absent). Three schemas are understood:

- :class:`GenericSchema` names the columns explicitly;
- ``"sixcity"`` expects ``group_id, response, age, smoke`` and builds the
  design (intercept, age, smoke) for a binary respiratory panel;
- ``"polypharmacy"`` expects ``group_id, response, gender, race, age, mhv,
  inptmhv`` and derives the usual coding: three dummies from the raw
  mental-health-visit count (1-5, 6-14, 15 or more) and a binarized
  inpatient indicator, giving the design (intercept, gender, race, age,
  mhv1, mhv2, mhv3, inptmhv).

Groups keep their order of first appearance in the file; rows keep file
order within a group. Unequal group sizes are accepted as-is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .models import GroupData, ModelKind

__all__ = [
    "Dataset",
    "GenericSchema",
    "simulate_lmm",
    "simulate_logistic",
    "load_grouped_csv",
    "write_grouped_csv",
    "reorder",
    "StudyConfig",
]


@dataclass
class Dataset:
    """Ordered groups plus the model family they belong to.

    ``provenance`` records where the data came from (simulation parameters
    and seed, or file path and schema) so every artifact built from the
    dataset can echo it.
    """

    groups: list[GroupData]
    model: ModelKind
    provenance: dict = field(default_factory=dict)
    x_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.groups:
            raise ValueError("dataset must contain at least one group")
        widths = {g.n_fixed for g in self.groups}
        if len(widths) != 1:
            raise ValueError(f"groups disagree on design width: {sorted(widths)}")
        if not self.x_names:
            self.x_names = [f"x{k + 1}" for k in range(self.n_fixed)]
        if len(self.x_names) != self.n_fixed:
            raise ValueError(
                f"{len(self.x_names)} covariate names for {self.n_fixed} columns"
            )

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_fixed(self) -> int:
        return self.groups[0].n_fixed

    @property
    def n_obs(self) -> int:
        return sum(g.n for g in self.groups)


def simulate_lmm(
    n_groups: int = 200,
    n_per_group: int = 10,
    beta=(-1.5, 1.5, 0.5, 0.25),
    sigma_alpha: float = 0.9,
    sigma_eps: float = 0.7,
    seed: int = 0,
) -> Dataset:
    """Linear mixed data: standard-normal covariates and loadings,
    y = X beta + z alpha + noise."""
    if n_groups < 1 or n_per_group < 1:
        raise ValueError("n_groups and n_per_group must be >= 1")
    if sigma_alpha < 0.0 or sigma_eps < 0.0:
        raise ValueError("scale parameters must be nonnegative")
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    groups = []
    for i in range(n_groups):
        X = rng.standard_normal((n_per_group, beta.shape[0]))
        z = rng.standard_normal(n_per_group)
        alpha = sigma_alpha * rng.standard_normal()
        eps = sigma_eps * rng.standard_normal(n_per_group)
        y = X @ beta + z * alpha + eps
        groups.append(GroupData(group_id=i, y=y, X=X, z=z))
    return Dataset(
        groups=groups,
        model=ModelKind.LINEAR_MIXED,
        provenance={
            "kind": "simulated",
            "model": "lmm",
            "seed": seed,
            "params": {
                "n_groups": n_groups,
                "n_per_group": n_per_group,
                "beta": [float(b) for b in beta],
                "sigma_alpha": sigma_alpha,
                "sigma_eps": sigma_eps,
            },
        },
    )


def simulate_logistic(
    n_groups: int = 500,
    n_per_group: int = 10,
    beta=(-1.5, 1.5, 0.5, 0.25),
    tau: float = 0.9,
    seed: int = 0,
) -> Dataset:
    """Logistic mixed data with a random intercept:
    y ~ Bernoulli(expit(X beta + alpha)), alpha ~ N(0, tau^2), z all ones."""
    if n_groups < 1 or n_per_group < 1:
        raise ValueError("n_groups and n_per_group must be >= 1")
    if tau < 0.0:
        raise ValueError("tau must be nonnegative")
    beta = np.asarray(beta, dtype=float)
    rng = np.random.default_rng(seed)
    groups = []
    for i in range(n_groups):
        X = rng.standard_normal((n_per_group, beta.shape[0]))
        alpha = tau * rng.standard_normal()
        prob = expit(X @ beta + alpha)
        y = (rng.random(n_per_group) < prob).astype(float)
        groups.append(GroupData(group_id=i, y=y, X=X, z=np.ones(n_per_group)))
    return Dataset(
        groups=groups,
        model=ModelKind.LOGISTIC_MIXED,
        provenance={
            "kind": "simulated",
            "model": "logistic",
            "seed": seed,
            "params": {
                "n_groups": n_groups,
                "n_per_group": n_per_group,
                "beta": [float(b) for b in beta],
                "tau": tau,
            },
        },
    )


# ---------------------------------------------------------------------------
# CSV schemas.


@dataclass(frozen=True)
class GenericSchema:
    """Column naming for generic long-format CSV."""

    x_columns: tuple[str, ...]
    response_column: str = "response"
    group_column: str = "group_id"
    z_column: str | None = None
    add_intercept: bool = False


_SIXCITY_COLUMNS = ["group_id", "response", "age", "smoke"]
_POLYPHARMACY_COLUMNS = [
    "group_id",
    "response",
    "gender",
    "race",
    "age",
    "mhv",
    "inptmhv",
]


def _require_columns(frame: pd.DataFrame, needed, path) -> None:
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}; have {list(frame.columns)}")


def _split_groups(
    frame: pd.DataFrame, group_col: str, build_group
) -> list[GroupData]:
    groups = []
    # groupby(sort=False) preserves first-appearance order
    for gid, rows in frame.groupby(group_col, sort=False):
        groups.append(build_group(gid, rows))
    return groups


def load_grouped_csv(
    path,
    schema: GenericSchema | str,
    model: ModelKind | None = None,
) -> Dataset:
    """Read long-format grouped data under one of the known schemas.

    ``schema`` is a :class:`GenericSchema` (with ``model`` required) or one
    of the strings ``"sixcity"`` / ``"polypharmacy"``, both binary-response
    panels that imply the logistic family and derive their design columns as
    described in the module docstring.
    """
    # default float parsing is lossy in the last bit; keep %.17g files exact
    frame = pd.read_csv(path, float_precision="round_trip")
    if len(frame) == 0:
        raise ValueError(f"{path}: no rows")

    if isinstance(schema, str):
        name = schema.lower()
        if name == "sixcity":
            return _load_sixcity(frame, path)
        if name == "polypharmacy":
            return _load_polypharmacy(frame, path)
        raise ValueError(
            f"unknown schema {schema!r}; expected 'sixcity', 'polypharmacy', "
            "or a GenericSchema"
        )

    if model is None:
        raise ValueError("generic schema requires the model family")
    _require_columns(
        frame,
        [schema.group_column, schema.response_column, *schema.x_columns]
        + ([schema.z_column] if schema.z_column else []),
        path,
    )

    x_names = list(schema.x_columns)
    if schema.add_intercept:
        x_names = ["intercept"] + x_names

    def build(gid, rows: pd.DataFrame) -> GroupData:
        X = rows[list(schema.x_columns)].to_numpy(dtype=float)
        if schema.add_intercept:
            X = np.column_stack([np.ones(len(rows)), X])
        z = (
            rows[schema.z_column].to_numpy(dtype=float)
            if schema.z_column
            else np.ones(len(rows))
        )
        return GroupData(
            group_id=gid,
            y=rows[schema.response_column].to_numpy(dtype=float),
            X=X,
            z=z,
        )

    return Dataset(
        groups=_split_groups(frame, schema.group_column, build),
        model=model,
        provenance={"kind": "file", "path": str(path), "schema": "generic"},
        x_names=x_names,
    )


def _load_sixcity(frame: pd.DataFrame, path) -> Dataset:
    _require_columns(frame, _SIXCITY_COLUMNS, path)

    def build(gid, rows: pd.DataFrame) -> GroupData:
        n = len(rows)
        X = np.column_stack(
            [
                np.ones(n),
                rows["age"].to_numpy(dtype=float),
                rows["smoke"].to_numpy(dtype=float),
            ]
        )
        return GroupData(
            group_id=gid, y=rows["response"].to_numpy(dtype=float), X=X, z=np.ones(n)
        )

    return Dataset(
        groups=_split_groups(frame, "group_id", build),
        model=ModelKind.LOGISTIC_MIXED,
        provenance={"kind": "file", "path": str(path), "schema": "sixcity"},
        x_names=["intercept", "age", "smoke"],
    )


def _load_polypharmacy(frame: pd.DataFrame, path) -> Dataset:
    _require_columns(frame, _POLYPHARMACY_COLUMNS, path)

    def build(gid, rows: pd.DataFrame) -> GroupData:
        n = len(rows)
        mhv = rows["mhv"].to_numpy(dtype=float)
        X = np.column_stack(
            [
                np.ones(n),
                rows["gender"].to_numpy(dtype=float),
                rows["race"].to_numpy(dtype=float),
                rows["age"].to_numpy(dtype=float),
                ((mhv >= 1) & (mhv <= 5)).astype(float),
                ((mhv >= 6) & (mhv <= 14)).astype(float),
                (mhv >= 15).astype(float),
                (rows["inptmhv"].to_numpy(dtype=float) != 0).astype(float),
            ]
        )
        return GroupData(
            group_id=gid, y=rows["response"].to_numpy(dtype=float), X=X, z=np.ones(n)
        )

    return Dataset(
        groups=_split_groups(frame, "group_id", build),
        model=ModelKind.LOGISTIC_MIXED,
        provenance={"kind": "file", "path": str(path), "schema": "polypharmacy"},
        x_names=[
            "intercept",
            "gender",
            "race",
            "age",
            "mhv1",
            "mhv2",
            "mhv3",
            "inptmhv",
        ],
    )


def write_grouped_csv(dataset: Dataset, path) -> None:
    """Write generic long-format CSV (always with an explicit ``z`` column).

    Floats are written with full round-trip precision, so loading the file
    back under the matching generic schema reproduces the arrays exactly.
    """
    records = []
    for g in dataset.groups:
        for j in range(g.n):
            row = {"group_id": g.group_id, "response": g.y[j]}
            for k, name in enumerate(dataset.x_names):
                row[name] = g.X[j, k]
            row["z"] = g.z[j]
            records.append(row)
    frame = pd.DataFrame.from_records(records)
    frame.to_csv(path, index=False, float_format="%.17g")


def reorder(dataset: Dataset, shuffle_seed: int | None = None) -> Dataset:
    """Copy of the dataset with groups in a new order.

    ``shuffle_seed=None`` keeps the original order; an integer shuffles with
    that seed (same seed, same permutation). Group contents are shared, not
    copied.
    """
    if shuffle_seed is None:
        groups = list(dataset.groups)
        ordering = {"ordering": "original"}
    else:
        perm = np.random.default_rng(shuffle_seed).permutation(dataset.n_groups)
        groups = [dataset.groups[i] for i in perm]
        ordering = {"ordering": "shuffle", "shuffle_seed": int(shuffle_seed)}
    return Dataset(
        groups=groups,
        model=dataset.model,
        provenance={**dataset.provenance, **ordering},
        x_names=list(dataset.x_names),
    )


# ---------------------------------------------------------------------------
# Study configuration document.

_STUDY_FIELD_TYPES = {
    "spec_version": int,
    "model": str,
    "prior_phi_mean": (int, float),
    "prior_beta_variance": (int, float),
    "prior_phi_variance": (int, float),
    "s_theta": int,
    "s_alpha": int,
    "n_temp": int,
    "k_steps": int,
    "seed": int,
    "mcmc_iters": int,
    "mcmc_burnin": int,
    "quad_order": int,
    "output_dir": str,
    "ordering_seeds": list,
}


@dataclass
class StudyConfig:
    """Validated settings document shared by the command-line workflows.

    Only ``spec_version`` is mandatory (and must equal 1); everything else
    is optional and overrides the command defaults. Unknown keys are
    rejected rather than ignored so typos surface before any computation.
    """

    values: dict = field(default_factory=lambda: {"spec_version": 1})

    def __post_init__(self) -> None:
        if "spec_version" not in self.values:
            raise ValueError("study config must declare spec_version")
        unknown = sorted(set(self.values) - set(_STUDY_FIELD_TYPES))
        if unknown:
            raise ValueError(f"unknown study config keys: {unknown}")
        for key, value in self.values.items():
            expected = _STUDY_FIELD_TYPES[key]
            if isinstance(value, bool) or not isinstance(value, expected):
                raise ValueError(
                    f"study config key {key!r} has type {type(value).__name__}"
                )
        if self.values["spec_version"] != 1:
            raise ValueError(
                f"unsupported spec_version {self.values['spec_version']}, expected 1"
            )
        if "model" in self.values and self.values["model"] not in ("lmm", "logistic"):
            raise ValueError("study config model must be 'lmm' or 'logistic'")
        seeds = self.values.get("ordering_seeds")
        if seeds is not None and not all(isinstance(s, int) for s in seeds):
            raise ValueError("ordering_seeds must be a list of integers")

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: study config must be a JSON object")
        return cls(values=data)

    def get(self, key: str, default=None):
        return self.values.get(key, default)
