"""Clustered data model, known propensities, and treatment-policy machinery.

A sample consists of independent clusters; unit `(i, j)` is row `j` of
cluster `i`.  Cluster covariates are shared by every unit in the cluster,
treatments are binary, and the cost of an untreated unit is zero.  All
containers are immutable after construction and safe to share across
parallel workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator

import numpy as np

CHANNELS = ("outcome", "cost")


class DatasetError(ValueError):
    """A dataset, policy, or assignment is structurally invalid."""


class PositivityError(ValueError):
    """A propensity value violates strict positivity."""


@dataclass
class ClusterDataset:
    """Columnar sample of clusters with per-unit treatments/outcomes/costs.

    Cluster ``i`` contributes ``sizes[i]`` consecutive rows to the
    unit-level arrays and shares the covariate row ``x[i]``.  Cluster-level
    totals are always derived from the unit arrays, never stored.
    """

    x: np.ndarray        # (n_clusters, d_x) cluster covariates
    z: np.ndarray        # (n_units, d_z) unit covariates
    w: np.ndarray        # (n_units,) binary treatments
    y: np.ndarray        # (n_units,) outcomes
    c: np.ndarray        # (n_units,) realized treatment costs
    sizes: np.ndarray    # (n_clusters,) units per cluster

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        w = np.asarray(self.w)
        if self.x.ndim != 2 or self.z.ndim != 2:
            raise DatasetError("x and z must be two-dimensional arrays")
        if self.sizes.ndim != 1 or len(self.sizes) != len(self.x):
            raise DatasetError("sizes must hold one entry per cluster")
        if len(self.sizes) == 0:
            raise DatasetError("dataset needs at least one cluster")
        if np.any(self.sizes < 1):
            raise DatasetError("empty cluster: every cluster needs at least one unit")
        n_units = int(self.sizes.sum())
        for name, arr in (("z", self.z), ("w", w), ("y", self.y), ("c", self.c)):
            if arr.ndim != 1 and name != "z":
                raise DatasetError(f"{name} must be one-dimensional")
            if len(arr) != n_units:
                raise DatasetError(f"{name} has {len(arr)} rows, expected {n_units}")
        if not np.isin(w, (0, 1)).all():
            raise DatasetError("treatments must be binary")
        self.w = w.astype(np.int8)
        for arr in (self.x, self.z, self.w, self.y, self.c, self.sizes):
            arr.setflags(write=False)

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def n_units(self) -> int:
        return len(self.w)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @cached_property
    def offsets(self) -> np.ndarray:
        """Row offsets of each cluster into the unit arrays, length N+1."""
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @cached_property
    def cluster_index(self) -> np.ndarray:
        """(n_units,) index of the cluster owning each unit row."""
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    @cached_property
    def x_units(self) -> np.ndarray:
        """Cluster covariates broadcast to unit rows, shape (n_units, d_x)."""
        return self.x[self.cluster_index]

    def cluster(self, i: int) -> "Cluster":
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return Cluster(
            x=self.x[i], z=self.z[lo:hi], w=self.w[lo:hi],
            y=self.y[lo:hi], c=self.c[lo:hi],
        )

    def iter_clusters(self) -> Iterator["Cluster"]:
        return (self.cluster(i) for i in range(self.n_clusters))

    def unit_values(self, channel: str = "outcome") -> np.ndarray:
        if channel == "outcome":
            return self.y
        if channel == "cost":
            return self.c
        raise ValueError(f"unknown channel {channel!r}; expected one of {CHANNELS}")

    def cluster_totals(self, channel: str = "outcome") -> np.ndarray:
        """Per-cluster sums of the selected channel, shape (n_clusters,)."""
        return np.bincount(
            self.cluster_index,
            weights=self.unit_values(channel),
            minlength=self.n_clusters,
        )


@dataclass
class Cluster:
    """Read-only view of one cluster."""

    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    y: np.ndarray
    c: np.ndarray

    @property
    def size(self) -> int:
        return len(self.w)


def aggregate_cluster(cluster: Cluster) -> tuple[float, float]:
    """Cluster-level totals (sum of outcomes, sum of costs)."""
    if cluster.size == 0:
        raise DatasetError("empty cluster")
    return float(np.sum(cluster.y)), float(np.sum(cluster.c))


def validate_dataset(dataset: ClusterDataset) -> list[str]:
    """All semantic invariant violations of a dataset (empty list when ok)."""
    violations: list[str] = []
    if np.any(dataset.sizes < 1):
        for i in np.flatnonzero(dataset.sizes < 1):
            violations.append(f"cluster {i}: empty cluster")
        return violations  # unit-aligned checks are meaningless past this point
    ci = dataset.cluster_index
    offsets = dataset.offsets

    def _unit_label(flat: int) -> str:
        i = int(ci[flat])
        return f"cluster {i} unit {flat - int(offsets[i])}"

    for flat in np.flatnonzero((dataset.w == 0) & (dataset.c != 0)):
        violations.append(f"{_unit_label(int(flat))}: cost without treatment")
    for flat in np.flatnonzero(dataset.c < 0):
        violations.append(f"{_unit_label(int(flat))}: negative cost")
    for name, arr in (("y", dataset.y), ("c", dataset.c)):
        for flat in np.flatnonzero(~np.isfinite(arr)):
            violations.append(f"{_unit_label(int(flat))}: non-finite {name}")
    for flat in np.flatnonzero(~np.isfinite(dataset.z).all(axis=1)):
        violations.append(f"{_unit_label(int(flat))}: non-finite unit covariates")
    for i in np.flatnonzero(~np.isfinite(dataset.x).all(axis=1)):
        violations.append(f"cluster {i}: non-finite cluster covariates")
    return violations


@dataclass
class PropensityModel:
    """Known treatment probability e_1(x), identical for all units of a cluster.

    ``treated_probability`` maps cluster covariates (n, d_x) to the
    probability of treatment; e_0 = 1 - e_1 by construction.
    """

    treated_probability: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def constant(cls, p: float) -> "PropensityModel":
        p = float(p)
        return cls(lambda x: np.full(len(x), p))

    def e1(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        e = np.asarray(self.treated_probability(x), dtype=np.float64)
        if e.ndim == 0:
            e = np.full(len(x), float(e))
        if e.shape != (len(x),):
            raise DatasetError("propensity must return one probability per cluster")
        bad = ~(np.isfinite(e) & (e > 0.0) & (e < 1.0))
        if bad.any():
            raise PositivityError(
                f"propensity outside (0, 1) for cluster {int(np.argmax(bad))}"
            )
        return e

    def e0(self, x: np.ndarray) -> np.ndarray:
        return 1.0 - self.e1(x)


@dataclass
class Policy:
    """Deterministic treatment rule: treat unit iff score(x, z) >= threshold."""

    scoring_rule: Callable[[np.ndarray, np.ndarray], np.ndarray]
    threshold: float


@dataclass
class PolicyAssignment:
    """Materialized per-unit policy decisions plus per-cluster treated fractions."""

    pi: np.ndarray       # (n_units,) binary decisions
    sizes: np.ndarray    # (n_clusters,) units per cluster

    def __post_init__(self) -> None:
        pi = np.asarray(self.pi)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if not np.isin(pi, (0, 1)).all():
            raise DatasetError("policy decisions must be binary")
        if len(pi) != int(self.sizes.sum()):
            raise DatasetError("assignment length does not match cluster sizes")
        self.pi = pi.astype(np.int8)
        self.pi.setflags(write=False)
        self.sizes.setflags(write=False)

    @property
    def n_units(self) -> int:
        return len(self.pi)

    @cached_property
    def n_treated(self) -> np.ndarray:
        """Per-cluster count of policy-treated units."""
        offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        return np.add.reduceat(self.pi.astype(np.int64), offsets)

    @cached_property
    def pi_bar(self) -> np.ndarray:
        """Per-cluster treated fraction, exactly n_treated / size."""
        return self.n_treated / self.sizes

    @classmethod
    def all_zeros(cls, sizes: np.ndarray) -> "PolicyAssignment":
        sizes = np.asarray(sizes, dtype=np.int64)
        return cls(np.zeros(int(sizes.sum()), dtype=np.int8), sizes)

    @classmethod
    def all_ones(cls, sizes: np.ndarray) -> "PolicyAssignment":
        sizes = np.asarray(sizes, dtype=np.int64)
        return cls(np.ones(int(sizes.sum()), dtype=np.int8), sizes)

    @classmethod
    def from_scores(
        cls, scores: np.ndarray, sizes: np.ndarray, threshold: float
    ) -> "PolicyAssignment":
        return cls((np.asarray(scores) >= threshold).astype(np.int8), sizes)


def policy_scores(policy: Policy, dataset: ClusterDataset) -> np.ndarray:
    """Scores of every unit under the policy's rule; non-finite scores error."""
    scores = np.asarray(
        policy.scoring_rule(dataset.x_units, dataset.z), dtype=np.float64
    )
    if scores.shape != (dataset.n_units,):
        raise DatasetError("scoring rule must return one score per unit")
    return check_finite_scores(scores, dataset.sizes)


def check_finite_scores(scores: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    bad = ~np.isfinite(scores)
    if bad.any():
        flat = int(np.argmax(bad))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        raise DatasetError(
            f"non-finite score for cluster {i} unit {flat - int(offsets[i])}"
        )
    return scores


def assign_policy(policy: Policy, dataset: ClusterDataset) -> PolicyAssignment:
    """Materialize per-unit decisions pi = 1(score >= threshold)."""
    scores = policy_scores(policy, dataset)
    return PolicyAssignment.from_scores(scores, dataset.sizes, policy.threshold)


# ---------------------------------------------------------------------------
# CSV serialization: one row per unit, cluster rows contiguous.
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return repr(float(value))


def write_dataset_csv(dataset: ClusterDataset, path) -> None:
    header = (
        ["cluster_id", "unit_id"]
        + [f"x_{k}" for k in range(dataset.d_x)]
        + [f"z_{k}" for k in range(dataset.d_z)]
        + ["w", "y", "c"]
    )
    ci = dataset.cluster_index
    offsets = dataset.offsets
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for flat in range(dataset.n_units):
            i = int(ci[flat])
            row = [str(i), str(flat - int(offsets[i]))]
            row += [_fmt(v) for v in dataset.x[i]]
            row += [_fmt(v) for v in dataset.z[flat]]
            row += [str(int(dataset.w[flat])), _fmt(dataset.y[flat]), _fmt(dataset.c[flat])]
            writer.writerow(row)


def read_dataset_csv(path) -> ClusterDataset:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        d_x = sum(1 for name in header if name.startswith("x_"))
        d_z = sum(1 for name in header if name.startswith("z_"))
        expected = (
            ["cluster_id", "unit_id"]
            + [f"x_{k}" for k in range(d_x)]
            + [f"z_{k}" for k in range(d_z)]
            + ["w", "y", "c"]
        )
        if header != expected or d_x == 0 or d_z == 0:
            raise DatasetError(f"{path}: unexpected header {header!r}")
        x_rows: list[list[float]] = []
        z_rows, w_vals, y_vals, c_vals, sizes = [], [], [], [], []
        seen: set[int] = set()
        current = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DatasetError(f"{path}:{lineno}: expected {len(expected)} fields")
            cid = int(row[0])
            xs = [float(v) for v in row[2:2 + d_x]]
            if cid != current:
                if cid in seen:
                    raise DatasetError(f"{path}:{lineno}: cluster {cid} rows not contiguous")
                seen.add(cid)
                current = cid
                x_rows.append(xs)
                sizes.append(0)
            elif xs != x_rows[-1]:
                raise DatasetError(
                    f"{path}:{lineno}: cluster covariates differ within cluster {cid}"
                )
            sizes[-1] += 1
            z_rows.append([float(v) for v in row[2 + d_x:2 + d_x + d_z]])
            w_vals.append(int(row[-3]))
            y_vals.append(float(row[-2]))
            c_vals.append(float(row[-1]))
    if not x_rows:
        raise DatasetError(f"{path}: no data rows")
    return ClusterDataset(
        x=np.array(x_rows), z=np.array(z_rows), w=np.array(w_vals),
        y=np.array(y_vals), c=np.array(c_vals), sizes=np.array(sizes),
    )
