"""Weighting estimators of policy value/cost under within-cluster interference.

Five strategies share one contract: a per-cluster contribution vector whose
mean is the estimate.

* ``naive``      - per-unit inverse propensity weighting that ignores any
                   interference between units.
* ``ipw``        - cluster-level weighting: a cluster contributes only when
                   its whole realized treatment vector matches the policy,
                   reweighted by the joint propensity.  Unbiased under the
                   randomized design alone, but the weight grows
                   exponentially with cluster size.
* ``frac_ipw``   - unit-level weighting under the treated-fraction exposure
                   mapping: a unit contributes when its own treatment and
                   its cluster's treated fraction both match the policy.
* ``beta_ipw:b`` - interaction-order-b weighting: the cluster weight sums,
                   over all unit subsets of size at most b, products of
                   centered per-unit match terms.  b = cluster size
                   collapses to ``ipw``; b = 1 is the additive special case
                   whose variance grows only quadratically in cluster size.
* ``aug_*``      - any of the cluster-weight estimators recentered by a
                   cross-fitted cluster-level outcome model, which preserves
                   unbiasedness because the weights have unit conditional
                   expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import ClusterDataset, PolicyAssignment, PositivityError, PropensityModel

ESTIMATOR_KINDS = ("naive", "ipw", "frac_ipw", "beta_ipw", "aug_ipw", "aug_beta_ipw")

# Bounds beyond which the variance-factor diagnostic refuses to evaluate.
_FACTOR_PROPENSITY_BOUNDS = (1e-6, 1.0 - 1e-6)


@dataclass
class ValueEstimate:
    """An estimate plus the per-cluster contributions whose mean it is."""

    value: float
    estimator_id: str
    contributions: Optional[np.ndarray] = None
    warnings: tuple[str, ...] = ()


def _check_assignment(dataset: ClusterDataset, assignment: PolicyAssignment) -> None:
    if assignment.n_units != dataset.n_units:
        raise ValueError("assignment does not match the dataset")


def _from_contributions(contributions: np.ndarray, estimator_id: str,
                        warnings: tuple[str, ...] = ()) -> ValueEstimate:
    return ValueEstimate(
        value=float(contributions.mean()),
        estimator_id=estimator_id,
        contributions=contributions,
        warnings=warnings,
    )


def _unit_propensity(e1: np.ndarray, cluster_index: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """e_{pi_ij}: probability that unit (i, j)'s treatment equals its decision."""
    return np.where(pi == 1, e1[cluster_index], 1.0 - e1[cluster_index])


def naive_value(
    dataset: ClusterDataset,
    assignment: PolicyAssignment,
    propensity: PropensityModel,
    channel: str = "outcome",
) -> ValueEstimate:
    """Per-unit IPW that assumes no interference between units."""
    _check_assignment(dataset, assignment)
    e1 = propensity.e1(dataset.x)
    ci = dataset.cluster_index
    e_pi = _unit_propensity(e1, ci, assignment.pi)
    values = dataset.unit_values(channel)
    terms = np.where(dataset.w == assignment.pi, values / e_pi, 0.0)
    contributions = np.bincount(ci, weights=terms, minlength=dataset.n_clusters)
    return _from_contributions(contributions, "naive")


def _ipw_cluster_weights(
    dataset: ClusterDataset, assignment: PolicyAssignment, e1: np.ndarray
) -> np.ndarray:
    """1(W_i = pi_i) / prod_j e_{pi_ij} per cluster."""
    ci = dataset.cluster_index
    n = dataset.n_clusters
    n_pi_treated = np.bincount(ci, weights=assignment.pi.astype(np.float64), minlength=n)
    mismatches = np.bincount(
        ci, weights=(dataset.w != assignment.pi).astype(np.float64), minlength=n
    )
    joint = e1 ** n_pi_treated * (1.0 - e1) ** (dataset.sizes - n_pi_treated)
    return np.where(mismatches == 0, 1.0 / joint, 0.0)


def ipw_value(
    dataset: ClusterDataset,
    assignment: PolicyAssignment,
    propensity: PropensityModel,
    channel: str = "outcome",
) -> ValueEstimate:
    """Cluster-level IPW: exact-match indicator over joint propensity."""
    _check_assignment(dataset, assignment)
    e1 = propensity.e1(dataset.x)
    weights = _ipw_cluster_weights(dataset, assignment, e1)
    contributions = weights * dataset.cluster_totals(channel)
    return _from_contributions(contributions, "ipw")


def ipw_variance_factor(
    dataset: ClusterDataset,
    assignment: PolicyAssignment,
    propensity: PropensityModel,
    cluster: Optional[int] = None,
):
    """Variance inflation factor prod_j (e1*e0 / e_{pi_ij}^2 + 1) - 1.

    Diagnostic for how fast the cluster-level IPW sampling variance grows
    with cluster size; returns the per-cluster vector, or a single factor
    when ``cluster`` is given.
    """
    _check_assignment(dataset, assignment)
    e1 = propensity.e1(dataset.x)
    lo, hi = _FACTOR_PROPENSITY_BOUNDS
    if ((e1 < lo) | (e1 > hi)).any():
        raise PositivityError(
            f"variance factor refuses propensities outside [{lo}, {hi}]"
        )
    e0 = 1.0 - e1
    n = dataset.n_clusters
    n_pi_treated = np.bincount(
        dataset.cluster_index, weights=assignment.pi.astype(np.float64), minlength=n
    )
    term_treated = e0 / e1 + 1.0       # e1*e0/e1^2 + 1
    term_control = e1 / e0 + 1.0
    factor = (
        term_treated ** n_pi_treated
        * term_control ** (dataset.sizes - n_pi_treated)
        - 1.0
    )
    if cluster is None:
        return factor
    return float(factor[cluster])


# ---------------------------------------------------------------------------
# Treated-fraction exposure weighting.
# ---------------------------------------------------------------------------


def q_weight(pi_ij: int, pi_bar: float, m: int, e1: float) -> float:
    """P(W_ij = pi_ij, treated fraction = pi_bar | cluster of size m).

    The fraction constraint makes the treated count binomial, and given the
    count every unit is treated with probability pi_bar, hence
    [pi_ij*pi_bar + (1-pi_ij)*(1-pi_bar)] * C(m, k) * e1^k * e0^(m-k)
    with k = pi_bar * m.
    """
    if m < 1:
        raise ValueError("cluster size must be positive")
    if pi_ij not in (0, 1):
        raise ValueError("pi_ij must be binary")
    if not 0.0 < e1 < 1.0:
        raise PositivityError("e1 must lie strictly between 0 and 1")
    k_float = pi_bar * m
    k = int(round(k_float))
    if abs(k_float - k) > 1e-9 or not 0 <= k <= m:
        raise ValueError(f"treated fraction {pi_bar} is not integral for size {m}")
    own = pi_bar if pi_ij == 1 else 1.0 - pi_bar
    return own * math.comb(m, k) * e1**k * (1.0 - e1) ** (m - k)


def _pascal_comb(n: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Elementwise binomial coefficients, exact in float64 for small n."""
    n_max = int(n.max())
    table = np.zeros((n_max + 1, n_max + 1))
    table[:, 0] = 1.0
    for row in range(1, n_max + 1):
        table[row, 1: row + 1] = table[row - 1, 1: row + 1] + table[row - 1, : row]
    return table[n, k]


def frac_ipw_value(
    dataset: ClusterDataset,
    assignment: PolicyAssignment,
    propensity: PropensityModel,
    channel: str = "outcome",
) -> ValueEstimate:
    """Per-unit weighting by the joint (own treatment, treated fraction) match."""
    _check_assignment(dataset, assignment)
    e1 = propensity.e1(dataset.x)
    ci = dataset.cluster_index
    n = dataset.n_clusters

    n_pi_treated = assignment.n_treated
    n_w_treated = np.bincount(ci, weights=dataset.w.astype(np.float64), minlength=n)
    fraction_match = n_w_treated == n_pi_treated

    pi_bar_unit = assignment.pi_bar[ci]
    own = np.where(assignment.pi == 1, pi_bar_unit, 1.0 - pi_bar_unit)
    count_prob = (
        _pascal_comb(dataset.sizes, n_pi_treated)
        * e1 ** n_pi_treated
        * (1.0 - e1) ** (dataset.sizes - n_pi_treated)
    )
    q = own * count_prob[ci]

    match = (dataset.w == assignment.pi) & fraction_match[ci]
    terms = np.zeros(dataset.n_units)
    idx = np.flatnonzero(match)
    terms[idx] = dataset.unit_values(channel)[idx] / q[idx]
    contributions = np.bincount(ci, weights=terms, minlength=n)
    return _from_contributions(contributions, "frac_ipw")


# ---------------------------------------------------------------------------
# Interaction-order-limited weighting.
# ---------------------------------------------------------------------------


def beta_weight(w_i, pi_i, e1: float, beta: int) -> float:
    """Cluster weight summing subset products of centered match terms.

    Sums, over every unit subset of cardinality at most ``beta`` (the empty
    subset contributes 1), the product of t_j = 1(w_j = pi_j)/e_{pi_j} - 1.
    Evaluated through the elementary-symmetric-polynomial recurrence in
    O(m * beta); subsets are never materialized.
    """
    w_i = np.asarray(w_i)
    pi_i = np.asarray(pi_i)
    m = len(w_i)
    if w_i.shape != pi_i.shape or w_i.ndim != 1:
        raise ValueError("treatment and decision vectors must be equal-length 1-d")
    if not isinstance(beta, (int, np.integer)) or not 1 <= beta <= m:
        raise ValueError(f"beta={beta} out of range [1, {m}]")
    if not 0.0 < e1 < 1.0:
        raise PositivityError("e1 must lie strictly between 0 and 1")
    e_pi = np.where(pi_i == 1, e1, 1.0 - e1)
    t = np.where(w_i == pi_i, 1.0 / e_pi, 0.0) - 1.0
    esp = np.zeros(beta + 1)
    esp[0] = 1.0
    for j in range(m):
        for order in range(min(j + 1, beta), 0, -1):
            esp[order] += t[j] * esp[order - 1]
    return float(esp.sum())


def _padded_units(dataset: ClusterDataset, values: np.ndarray) -> np.ndarray:
    """Unit values as a zero-padded (n_clusters, max_size) matrix."""
    sizes = dataset.sizes
    m_max = int(sizes.max())
    if (sizes == m_max).all():
        return values.reshape(dataset.n_clusters, m_max)
    out = np.zeros((dataset.n_clusters, m_max))
    cols = np.arange(dataset.n_units) - dataset.offsets[:-1][dataset.cluster_index]
    out[dataset.cluster_index, cols] = values
    return out


def _beta_cluster_weights(
    dataset: ClusterDataset,
    assignment: PolicyAssignment,
    e1: np.ndarray,
    beta: int,
) -> np.ndarray:
    """Vectorized subset-product weights; zero padding clamps beta per cluster.

    Padded entries carry t = 0 and therefore never contribute to any subset
    product, so a cluster of size m < beta automatically sums orders up to m
    only, which equals its full cluster-level IPW weight.
    """
    ci = dataset.cluster_index
    e_pi = _unit_propensity(e1, ci, assignment.pi)
    t = np.where(dataset.w == assignment.pi, 1.0 / e_pi, 0.0) - 1.0
    t_matrix = _padded_units(dataset, t)
    m_max = t_matrix.shape[1]
    b = min(beta, m_max)
    esp = np.zeros((dataset.n_clusters, b + 1))
    esp[:, 0] = 1.0
    for j in range(m_max):
        column = t_matrix[:, j]
        for order in range(min(j + 1, b), 0, -1):
            esp[:, order] += column * esp[:, order - 1]
    return esp.sum(axis=1)


def beta_ipw_value(
    dataset: ClusterDataset,
    assignment: PolicyAssignment,
    propensity: PropensityModel,
    beta: int,
    channel: str = "outcome",
) -> ValueEstimate:
    """Interaction-order-``beta`` weighting of cluster totals.

    ``beta`` larger than a cluster's size is clamped to that size, where the
    weight coincides with the cluster-level IPW weight.
    """
    _check_assignment(dataset, assignment)
    if not isinstance(beta, (int, np.integer)) or beta < 1:
        raise ValueError("beta must be a positive integer")
    e1 = propensity.e1(dataset.x)
    weights = _beta_cluster_weights(dataset, assignment, e1, int(beta))
    contributions = weights * dataset.cluster_totals(channel)
    return _from_contributions(contributions, f"beta_ipw:{int(beta)}")


# ---------------------------------------------------------------------------
# Cluster-level outcome model and augmented estimators.
# ---------------------------------------------------------------------------


@dataclass
class SolverSettings:
    tol: float = 1e-8       # convergence: max absolute gradient entry
    max_iter: int = 100
    ridge: float = 1e-6     # keeps separable fits bounded


@dataclass
class OutcomeModel:
    """Logistic model of a binary cluster total given cluster covariates."""

    intercept: float
    coef: np.ndarray
    converged: bool
    n_iter: int
    degenerate: bool = False

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits = np.asarray(x, dtype=np.float64) @ self.coef + self.intercept
        p = 1.0 / (1.0 + np.exp(-logits))
        return np.clip(p, 1e-12, 1.0 - 1e-12)


def _newton_logistic(design: np.ndarray, y: np.ndarray, settings: SolverSettings):
    """Damped Newton maximum likelihood with an L2 ridge."""

    def loss(beta):
        logits = design @ beta
        return float(
            np.sum(np.logaddexp(0.0, logits) - y * logits)
            + 0.5 * settings.ridge * beta @ beta
        )

    beta = np.zeros(design.shape[1])
    converged = False
    iterations = 0
    for iterations in range(1, settings.max_iter + 1):
        p = 1.0 / (1.0 + np.exp(-(design @ beta)))
        gradient = design.T @ (p - y) + settings.ridge * beta
        if np.abs(gradient).max() < settings.tol:
            converged = True
            break
        curvature = p * (1.0 - p)
        hessian = (design * curvature[:, None]).T @ design
        hessian[np.diag_indices_from(hessian)] += settings.ridge
        step = np.linalg.solve(hessian, gradient)
        scale = 1.0
        reference = loss(beta)
        while scale > 1e-10 and loss(beta - scale * step) > reference:
            scale *= 0.5
        beta = beta - scale * step
    return beta, converged, iterations


def fit_outcome_model(
    x: np.ndarray, y: np.ndarray, settings: Optional[SolverSettings] = None
) -> OutcomeModel:
    """Fit the logistic cluster-total model; single-label data degenerates
    to an intercept-only (ridge-bounded) constant model with a warning flag."""
    settings = settings or SolverSettings()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, d) with one label per row")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("outcome-model labels must be binary")
    degenerate = len(np.unique(y)) < 2
    if degenerate:
        design = np.ones((len(y), 1))
    else:
        design = np.hstack([np.ones((len(y), 1)), x])
    beta, converged, n_iter = _newton_logistic(design, y, settings)
    coef = np.zeros(x.shape[1]) if degenerate else beta[1:]
    return OutcomeModel(
        intercept=float(beta[0]),
        coef=coef,
        converged=converged,
        n_iter=n_iter,
        degenerate=degenerate,
    )


def crossfit_outcome_predictions(
    dataset: ClusterDataset,
    channel: str = "outcome",
    folds: int = 2,
    fold_seed: int = 0,
    settings: Optional[SolverSettings] = None,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Out-of-fold cluster-total predictions via a seeded cluster shuffle.

    Every cluster's prediction comes from a model fitted on the
    complementary folds, so predictions are independent of the cluster's
    own outcome.
    """
    if folds < 2:
        raise ValueError("cross-fitting needs at least 2 folds")
    if folds > dataset.n_clusters:
        raise ValueError("more folds than clusters")
    totals = dataset.cluster_totals(channel)
    if not np.isin(totals, (0.0, 1.0)).all():
        raise ValueError("augmentation requires binary cluster totals")
    permutation = np.random.default_rng(fold_seed).permutation(dataset.n_clusters)
    fold_id = np.empty(dataset.n_clusters, dtype=np.int64)
    fold_id[permutation] = np.arange(dataset.n_clusters) % folds
    predictions = np.empty(dataset.n_clusters)
    warnings: list[str] = []
    for fold in range(folds):
        held_out = fold_id == fold
        model = fit_outcome_model(dataset.x[~held_out], totals[~held_out], settings)
        if model.degenerate:
            warnings.append(f"fold {fold}: single-label training outcomes")
        predictions[held_out] = model.predict_proba(dataset.x[held_out])
    return predictions, tuple(warnings)


def augmented_value(
    dataset: ClusterDataset,
    assignment: PolicyAssignment,
    propensity: PropensityModel,
    base: str = "ipw",
    *,
    beta: Optional[int] = None,
    folds: int = 2,
    channel: str = "outcome",
    fold_seed: int = 0,
    ghat: Optional[np.ndarray] = None,
) -> ValueEstimate:
    """Weighting estimator recentered by a cross-fitted outcome model.

    Per cluster: weight * (total - ghat) + ghat.  Unbiasedness of the base
    weight is preserved because its conditional expectation given cluster
    covariates is 1.  ``ghat`` may be supplied to reuse one cross-fit across
    the thresholds of a sweep.
    """
    _check_assignment(dataset, assignment)
    e1 = propensity.e1(dataset.x)
    if base == "ipw":
        weights = _ipw_cluster_weights(dataset, assignment, e1)
        estimator_id = "aug_ipw"
    elif base == "beta_ipw":
        if beta is None:
            raise ValueError("base 'beta_ipw' requires beta")
        weights = _beta_cluster_weights(dataset, assignment, e1, int(beta))
        estimator_id = f"aug_beta_ipw:{int(beta)}"
    else:
        raise ValueError(f"unknown augmentation base {base!r}")
    warnings: tuple[str, ...] = ()
    if ghat is None:
        ghat, warnings = crossfit_outcome_predictions(
            dataset, channel=channel, folds=folds, fold_seed=fold_seed
        )
    else:
        ghat = np.asarray(ghat, dtype=np.float64)
        if ghat.shape != (dataset.n_clusters,):
            raise ValueError("ghat must hold one prediction per cluster")
    totals = dataset.cluster_totals(channel)
    contributions = weights * (totals - ghat) + ghat
    return _from_contributions(contributions, estimator_id, warnings)


# ---------------------------------------------------------------------------
# String registry: the stable estimator ids used in configs and outputs.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    beta: Optional[int] = None

    @property
    def estimator_id(self) -> str:
        return self.kind if self.beta is None else f"{self.kind}:{self.beta}"


def parse_estimator_id(estimator_id: str) -> EstimatorSpec:
    """Validate ids such as 'ipw', 'beta_ipw:2', 'aug_ipw', 'aug_beta_ipw:1'."""
    kind, _, argument = estimator_id.partition(":")
    if kind in ("naive", "ipw", "frac_ipw", "aug_ipw"):
        if argument:
            raise ValueError(f"estimator {kind!r} takes no parameter")
        return EstimatorSpec(kind)
    if kind in ("beta_ipw", "aug_beta_ipw"):
        try:
            beta = int(argument)
        except ValueError:
            raise ValueError(
                f"estimator {kind!r} needs an integer order, e.g. '{kind}:2'"
            ) from None
        if beta < 1:
            raise ValueError("interaction order must be at least 1")
        return EstimatorSpec(kind, beta)
    raise ValueError(f"unknown estimator id {estimator_id!r}")


def make_value_fn(
    estimator_id: str,
    dataset: ClusterDataset,
    propensity: PropensityModel,
    channel: str = "outcome",
    folds: int = 2,
    fold_seed: int = 0,
) -> Callable[[PolicyAssignment], float]:
    """Bind an estimator to a dataset for repeated policy evaluations.

    Augmented estimators cross-fit their outcome model once here and reuse
    it for every assignment.
    """
    spec = parse_estimator_id(estimator_id)
    ghat: Optional[np.ndarray] = None
    if spec.kind.startswith("aug_"):
        ghat, _ = crossfit_outcome_predictions(
            dataset, channel=channel, folds=folds, fold_seed=fold_seed
        )

    def value_fn(assignment: PolicyAssignment) -> float:
        if spec.kind == "naive":
            est = naive_value(dataset, assignment, propensity, channel)
        elif spec.kind == "ipw":
            est = ipw_value(dataset, assignment, propensity, channel)
        elif spec.kind == "frac_ipw":
            est = frac_ipw_value(dataset, assignment, propensity, channel)
        elif spec.kind == "beta_ipw":
            est = beta_ipw_value(dataset, assignment, propensity, spec.beta, channel)
        elif spec.kind == "aug_ipw":
            est = augmented_value(
                dataset, assignment, propensity, "ipw", channel=channel, ghat=ghat
            )
        else:
            est = augmented_value(
                dataset, assignment, propensity, "beta_ipw",
                beta=spec.beta, channel=channel, ghat=ghat,
            )
        return est.value

    value_fn.estimator_id = estimator_id  # type: ignore[attr-defined]
    return value_fn
