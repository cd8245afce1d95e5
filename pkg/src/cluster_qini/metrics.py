"""Aggregation of repeated Qini estimates: calibration and ranking quality.

Calibration summarizes how estimated curves track the oracle across
repetitions (bias, variance, mean squared error); discrimination summarizes
how well estimated areas under the curve rank competing policies (Kendall
rank correlation against the oracle ranking).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats


@dataclass
class CalibrationReport:
    """Grid-averaged bias/variance/MSE over repetitions, with standard errors.

    The origin point k = 0 is identically (0, 0) and excluded from every
    average.  Variance uses the population convention (divide by R), so
    mse = bias^2 + variance holds exactly per grid point against a fixed
    truth.  Standard errors are across-repetition: SE of the mean for bias
    and MSE, delete-one jackknife for the variance.
    """

    bias: float
    variance: float
    mse: float
    repetitions: int
    se_bias: float
    se_variance: float
    se_mse: float


def _jackknife_variance_se(estimates: np.ndarray) -> float:
    """Delete-one-repetition SE of mean-over-grid population variance."""
    r = len(estimates)
    if r < 3:
        return float("nan")
    s1 = estimates.sum(axis=0)
    s2 = (estimates**2).sum(axis=0)
    loo_mean = (s1[None, :] - estimates) / (r - 1)
    loo_var = (s2[None, :] - estimates**2) / (r - 1) - loo_mean**2
    loo_stat = loo_var.mean(axis=1)
    return float(np.sqrt((r - 1) / r * np.sum((loo_stat - loo_stat.mean()) ** 2)))


def calibration(estimates: np.ndarray, truth: np.ndarray) -> CalibrationReport:
    """Compare R repeated curves against the truth on one grid.

    ``estimates`` has shape (R, K+1).  ``truth`` is either a single curve of
    length K+1 or one curve per repetition with shape (R, K+1), for data
    generating processes whose exact values move with each covariate draw.
    """
    estimates = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimates.ndim != 2:
        raise ValueError("estimates must be (repetitions, grid) shaped")
    r, n_points = estimates.shape
    if truth.ndim == 1:
        if truth.shape != (n_points,):
            raise ValueError("truth grid does not match the estimates grid")
        truth = np.broadcast_to(truth, estimates.shape)
    elif truth.shape != estimates.shape:
        raise ValueError("per-repetition truth must match the estimates shape")
    if n_points < 2:
        raise ValueError("curves need at least one non-origin point")

    est = estimates[:, 1:]
    tru = truth[:, 1:]
    errors = est - tru
    bias = float(errors.mean())
    variance = float(est.var(axis=0, ddof=0).mean())
    mse = float((errors**2).mean())
    if r > 1:
        se_bias = float(errors.mean(axis=1).std(ddof=1) / math.sqrt(r))
        se_mse = float((errors**2).mean(axis=1).std(ddof=1) / math.sqrt(r))
    else:
        se_bias = float("nan")
        se_mse = float("nan")
    return CalibrationReport(
        bias=bias,
        variance=variance,
        mse=mse,
        repetitions=r,
        se_bias=se_bias,
        se_variance=_jackknife_variance_se(est),
        se_mse=se_mse,
    )


def kendall_tau(rank_a: Sequence[float], rank_b: Sequence[float]) -> float:
    """Kendall rank correlation of two aligned value vectors.

    (concordant - discordant) / (n(n-1)/2); exact ties are handled by the
    tau-b convention so tied estimates stay deterministic.
    """
    a = np.asarray(rank_a, dtype=np.float64)
    b = np.asarray(rank_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("rankings must be equal-length vectors")
    if len(a) < 2:
        raise ValueError("rank correlation needs at least two items")
    tau = stats.kendalltau(a, b, variant="b").statistic
    if math.isnan(tau):
        raise ValueError("rank correlation undefined: a ranking is constant")
    return float(tau)


@dataclass
class RankingReport:
    """Per-estimator agreement with the oracle policy ranking."""

    policies: tuple
    true_auc: np.ndarray
    estimated_auc: dict[str, np.ndarray]
    tau: dict[str, float]


def rank_policies(
    true_auc: Mapping[object, float],
    estimated_auc: Mapping[str, Mapping[object, float]],
) -> RankingReport:
    """Rank policies by estimated AUC and score each estimator against truth."""
    policies = tuple(true_auc)
    if len(policies) < 2:
        raise ValueError("ranking needs at least two policies")
    truth = np.array([float(true_auc[p]) for p in policies])
    estimates: dict[str, np.ndarray] = {}
    taus: dict[str, float] = {}
    for estimator_id, per_policy in estimated_auc.items():
        missing = [p for p in policies if p not in per_policy]
        if missing:
            raise ValueError(
                f"estimator {estimator_id!r} is missing curves for policies {missing}"
            )
        values = np.array([float(per_policy[p]) for p in policies])
        estimates[estimator_id] = values
        taus[estimator_id] = kendall_tau(truth, values)
    return RankingReport(
        policies=policies, true_auc=truth, estimated_auc=estimates, tau=taus
    )
