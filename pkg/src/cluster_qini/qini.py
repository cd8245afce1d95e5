"""Qini curves from a threshold sweep over score percentiles.

The sweep sorts all units by (tie-broken) score descending and walks K
percentile thresholds; each threshold materializes a policy whose
incremental value over the treat-none reference is one curve point.  Any
policy-value estimator can drive the sweep, including a simulator oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import (
    ClusterDataset,
    DatasetError,
    PolicyAssignment,
    check_finite_scores,
)


@dataclass
class QiniCurve:
    """Ordered (budget, incremental value) points; the first point is (0, 0)."""

    budgets: np.ndarray
    values: np.ndarray
    estimator_id: str = "custom"
    uniform_cost: bool = True
    b_max: float = 1.0

    def __post_init__(self) -> None:
        self.budgets = np.asarray(self.budgets, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.budgets.shape != self.values.shape or self.budgets.ndim != 1:
            raise ValueError("budgets and values must be 1-d arrays of equal length")
        if len(self.budgets) < 2:
            raise ValueError("a curve needs at least the origin and one point")
        if self.budgets[0] != 0.0 or self.values[0] != 0.0:
            raise ValueError("the first curve point must be exactly (0, 0)")
        if self.b_max <= 0:
            raise ValueError("b_max must be positive")

    @property
    def k(self) -> int:
        return len(self.budgets) - 1

    def auc(self) -> float:
        return auc(self)


def apply_tie_break(scores: np.ndarray, tie_noise_seed: int) -> np.ndarray:
    """Seeded strict-ordering perturbation that never reorders distinct scores.

    Uniform noise of half-width 1e-9 times the score range (1e-9 when the
    range is zero) is added; the draw is repeated with halved width until
    the perturbed scores are pairwise distinct and every originally strict
    comparison is preserved.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if len(scores) == 0:
        raise ValueError("no scores to perturb")
    span = float(scores.max() - scores.min())
    half_width = 1e-9 * span if span > 0 else 1e-9
    rng = np.random.default_rng(tie_noise_seed)
    for _ in range(64):
        perturbed = scores + rng.uniform(-half_width, half_width, size=len(scores))
        order = np.argsort(perturbed, kind="stable")
        if (np.diff(perturbed[order]) > 0).all() and (np.diff(scores[order]) >= 0).all():
            return perturbed
        half_width *= 0.5
    raise RuntimeError("tie-break noise failed to produce an order-preserving strict ranking")


def _round_half_away(num: int, den: int) -> int:
    """round(num / den) with halves away from zero, exact for positive ints."""
    return (2 * num + den) // (2 * den)


def prepare_assignments(
    scores: np.ndarray,
    sizes: np.ndarray,
    k: int,
    tie_noise_seed: int = 0,
) -> list[PolicyAssignment]:
    """Treat-none plus the K threshold policies, shared by all estimators.

    The grid index i_k = round(k_step / K * n) is clamped to at least 1; the
    unit at the threshold is treated (decision rule: score >= threshold).
    The final grid point always treats every unit.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    scores = check_finite_scores(scores, sizes)
    n = len(scores)
    if k < 1:
        raise ValueError("K must be at least 1")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of units ({n})")
    perturbed = apply_tie_break(scores, tie_noise_seed)
    descending = np.sort(perturbed)[::-1]
    assignments = [PolicyAssignment.all_zeros(sizes)]
    for step in range(1, k + 1):
        i_k = max(1, _round_half_away(step * n, k))
        threshold = descending[i_k - 1]
        assignments.append(
            PolicyAssignment((perturbed >= threshold).astype(np.int8), sizes)
        )
    assert assignments[-1].pi.all(), "final grid point must treat every unit"
    return assignments


def threshold_sweep(
    scores: np.ndarray,
    sizes: np.ndarray,
    k: int,
    value_fn: Callable[[PolicyAssignment], float],
    cost_fn: Optional[Callable[[PolicyAssignment], float]] = None,
    *,
    b_max: float = 1.0,
    uniform_cost: bool = True,
    tie_noise_seed: int = 0,
    estimator_id: str = "custom",
) -> QiniCurve:
    """Run the percentile sweep with a bound value (and optionally cost) function."""
    if not uniform_cost and cost_fn is None:
        raise ValueError("a cost estimator is required when cost is not uniform")
    assignments = prepare_assignments(scores, sizes, k, tie_noise_seed)
    v0 = float(value_fn(assignments[0]))
    budgets = [0.0]
    values = [0.0]
    for step, assignment in enumerate(assignments[1:], start=1):
        values.append(float(value_fn(assignment)) - v0)
        if uniform_cost:
            budgets.append(step / k * b_max)
        else:
            budgets.append(float(cost_fn(assignment)))
    return QiniCurve(
        np.array(budgets), np.array(values),
        estimator_id=estimator_id, uniform_cost=uniform_cost, b_max=b_max,
    )


def _as_value(result) -> float:
    return float(getattr(result, "value", result))


def estimate_qini_curve(
    dataset: ClusterDataset,
    scoring_rule: Callable[[np.ndarray, np.ndarray], np.ndarray],
    k: int,
    value_estimator: Callable[[ClusterDataset, PolicyAssignment], object],
    cost_estimator: Optional[Callable[[ClusterDataset, PolicyAssignment], object]] = None,
    *,
    b_max: float = 1.0,
    uniform_cost: bool = True,
    tie_noise_seed: int = 0,
) -> QiniCurve:
    """Estimate the curve of a scoring rule on a dataset.

    ``value_estimator`` (and ``cost_estimator`` in the non-uniform-cost case)
    is any callable of (dataset, assignment) returning a float or an object
    with a ``value`` attribute.
    """
    scores = np.asarray(
        scoring_rule(dataset.x_units, dataset.z), dtype=np.float64
    )
    if scores.shape != (dataset.n_units,):
        raise DatasetError("scoring rule must return one score per unit")
    cost_fn = None
    if cost_estimator is not None:
        cost_fn = lambda a: _as_value(cost_estimator(dataset, a))  # noqa: E731
    return threshold_sweep(
        scores,
        dataset.sizes,
        k,
        lambda a: _as_value(value_estimator(dataset, a)),
        cost_fn,
        b_max=b_max,
        uniform_cost=uniform_cost,
        tie_noise_seed=tie_noise_seed,
        estimator_id=getattr(value_estimator, "estimator_id", "custom"),
    )


def auc(curve: QiniCurve) -> float:
    """Trapezoidal area under the curve, normalized by the maximal budget."""
    budgets, values = curve.budgets, curve.values
    if len(budgets) < 2:
        raise ValueError("AUC needs at least two curve points")
    deltas = np.diff(budgets)
    if (deltas < 0).any():
        raise ValueError("budgets decrease; estimated-cost curve is not AUC-ready")
    area = float(np.sum(0.5 * (values[1:] + values[:-1]) * deltas))
    return area / float(curve.b_max)


def curve_rows(
    curve: QiniCurve, seed: int, repetition: int
) -> list[tuple[int, float, float, str, int, int]]:
    """Serialization rows (k, budget, qini, estimator_id, seed, repetition)."""
    return [
        (k, float(curve.budgets[k]), float(curve.values[k]),
         curve.estimator_id, seed, repetition)
        for k in range(len(curve.budgets))
    ]
