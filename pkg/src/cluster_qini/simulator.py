"""Marketplace simulator with within-cluster cannibalization, plus its oracle.

Clusters are buyers, units are the items each buyer sees.  Treating an item
raises its attractiveness; a buyer makes at most one purchase, so treatments
can shift purchases between items instead of creating them.  The oracle
evaluates any policy's exact value conditional on the sampled covariates and
responsiveness masks, with no outcome noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import seeding
from .data import ClusterDataset, DatasetError, PolicyAssignment, check_finite_scores
from .qini import QiniCurve, threshold_sweep

D_X = 12
D_Z = 11
ETA_KINDS = ("max", "product", "exp_decay")
MASK_MODES = ("increment", "whole")

# Scale applied to the sampled uniform coefficient matrices.  The raw
# bilinear form of nonnegative uniform entries sums d_x * d_z terms, so an
# unscaled draw saturates the [0, 1] clip for every unit and erases all
# treatment effects; 2 / (d_x * d_z) keeps base attractiveness near 0.25 and
# makes clipping a rare event.
DEFAULT_OMEGA_SCALE = 2.0 / (D_X * D_Z)


@dataclass
class SimulatorParams:
    """Full configuration of the data-generating process."""

    n_clusters: int
    n_units: int
    omega_0: np.ndarray          # (d_x, d_z) untreated attractiveness coefficients
    omega_1: np.ndarray          # (d_x, d_z) treatment-increment coefficients
    eta_kind: str = "exp_decay"
    softmax_temperature: float = 0.1
    treat_prob: float = 0.5
    mask_prob: float = 0.5       # probability an item responds to treatment
    mask_mode: str = "increment"
    price_base: float = 20.0
    price_slope: float = 100.0
    margin_base: float = 0.01
    margin_slope: float = 0.05
    discount: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        self.omega_0 = np.asarray(self.omega_0, dtype=np.float64)
        self.omega_1 = np.asarray(self.omega_1, dtype=np.float64)
        if self.n_clusters < 1 or self.n_units < 1:
            raise ValueError("n_clusters and n_units must be positive")
        if self.omega_0.ndim != 2 or self.omega_0.shape != self.omega_1.shape:
            raise ValueError("omega matrices must share one (d_x, d_z) shape")
        if self.eta_kind not in ETA_KINDS:
            raise ValueError(f"eta_kind must be one of {ETA_KINDS}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.softmax_temperature <= 0:
            raise ValueError("softmax temperature must be positive")
        if not 0 < self.treat_prob < 1:
            raise ValueError("treat_prob must lie strictly between 0 and 1")
        if not 0 <= self.mask_prob <= 1:
            raise ValueError("mask_prob must lie in [0, 1]")

    @property
    def d_x(self) -> int:
        return self.omega_0.shape[0]

    @property
    def d_z(self) -> int:
        return self.omega_0.shape[1]

    @classmethod
    def sampled(
        cls,
        n_clusters: int,
        n_units: int,
        *,
        seed: int,
        omega_scale: float = DEFAULT_OMEGA_SCALE,
        d_x: int = D_X,
        d_z: int = D_Z,
        **kwargs,
    ) -> "SimulatorParams":
        """Params with coefficient matrices drawn from the master seed."""
        rng = seeding.named_stream(seed, "omega")
        omega_0 = rng.uniform(0.0, 1.0, size=(d_x, d_z)) * omega_scale
        omega_1 = rng.uniform(0.0, 1.0, size=(d_x, d_z)) * omega_scale
        return cls(
            n_clusters=n_clusters, n_units=n_units,
            omega_0=omega_0, omega_1=omega_1, seed=seed, **kwargs,
        )

    def with_shape(self, n_clusters: int, n_units: int) -> "SimulatorParams":
        return replace(self, n_clusters=n_clusters, n_units=n_units)


def _bilinear(x_units: np.ndarray, omega: np.ndarray, z_units: np.ndarray) -> np.ndarray:
    """Per-unit x' Omega z for row-aligned covariate matrices."""
    return np.einsum("nd,nd->n", x_units @ omega, z_units)


def attractiveness(x, z, w, delta, params: SimulatorParams) -> float:
    """Attractiveness of a single unit, clipped once to [0, 1] after summation."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != (params.d_x,) or z.shape != (params.d_z,):
        raise ValueError(
            f"covariate shapes {x.shape}/{z.shape} do not match ({params.d_x},)/({params.d_z},)"
        )
    a0 = float(x @ params.omega_0 @ z)
    a1 = float(x @ params.omega_1 @ z)
    return float(_combine(np.array([a0]), np.array([a1]), np.array([w]),
                          np.array([delta]), params.mask_mode)[0])


def _combine(a0, a1, w, delta, mask_mode: str) -> np.ndarray:
    """Combine base and treatment components under the chosen masking rule.

    ``increment`` masks only the treatment increment, so unresponsive items
    keep their base attractiveness; ``whole`` masks the entire sum.
    """
    if mask_mode == "increment":
        raw = a0 + delta * w * a1
    elif mask_mode == "whole":
        raw = delta * (a0 + w * a1)
    else:
        raise ValueError(f"mask_mode must be one of {MASK_MODES}")
    return np.clip(raw, 0.0, 1.0)


def purchase_probability(a_rows: np.ndarray, eta_kind: str) -> np.ndarray:
    """P(any purchase) per buyer row for the chosen interference structure.

    ``max``: only the most attractive item matters.  ``product``: items
    contribute independently.  ``exp_decay``: the r-th most attractive item
    contributes with weight (1/2)^r, r = 1 for the top item; ties are
    resolved by item index, which leaves the sum unchanged.
    """
    a = np.asarray(a_rows, dtype=np.float64)
    squeeze = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] == 0:
        raise ValueError("attractiveness rows must hold at least one item")
    if (a < 0).any() or (a > 1).any():
        raise ValueError("attractiveness entries must lie in [0, 1]")
    if eta_kind == "max":
        out = a.max(axis=1)
    elif eta_kind == "product":
        out = 1.0 - np.prod(1.0 - a, axis=1)
    elif eta_kind == "exp_decay":
        ordered = np.sort(a, axis=1)[:, ::-1]
        weights = 0.5 ** np.arange(1, a.shape[1] + 1)
        out = ordered @ weights
    else:
        raise ValueError(f"eta_kind must be one of {ETA_KINDS}")
    return float(out[0]) if squeeze else out


def softmax_probabilities(a_row: np.ndarray, temperature: float) -> np.ndarray:
    """Item-choice probabilities proportional to exp(a / temperature)."""
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    logits = np.asarray(a_row, dtype=np.float64) / temperature
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def choose_item(a_row: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Sample which item is purchased, conditional on a purchase occurring."""
    probabilities = softmax_probabilities(a_row, temperature)
    return int(rng.choice(len(probabilities), p=probabilities))


def _sample_items(a: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorized softmax choice: one item index per buyer row."""
    probabilities = softmax_probabilities(a, temperature)
    cdf = np.cumsum(probabilities, axis=1)
    u = rng.uniform(size=(len(a), 1))
    return np.minimum((u > cdf).sum(axis=1), a.shape[1] - 1)


@dataclass
class GroundTruth:
    """Frozen covariate/mask draw: enough to evaluate any policy exactly.

    Values are deterministic given the sample and a policy, and independent
    of the realized treatments and outcomes.
    """

    params: SimulatorParams
    x: np.ndarray          # (N, d_x)
    z: np.ndarray          # (N, M, d_z)
    delta: np.ndarray      # (N, M) responsiveness masks
    a0: np.ndarray         # (N, M) untreated attractiveness component
    a1: np.ndarray         # (N, M) unmasked treatment increment

    @property
    def n_clusters(self) -> int:
        return len(self.x)

    @property
    def n_items(self) -> int:
        return self.z.shape[1]

    @property
    def n_units(self) -> int:
        return self.n_clusters * self.n_items

    @property
    def sizes(self) -> np.ndarray:
        return np.full(self.n_clusters, self.n_items, dtype=np.int64)

    @property
    def x_units(self) -> np.ndarray:
        return np.repeat(self.x, self.n_items, axis=0)

    @property
    def z_units(self) -> np.ndarray:
        return self.z.reshape(-1, self.params.d_z)

    def attractiveness_under(self, pi) -> np.ndarray:
        pi = pi.pi if isinstance(pi, PolicyAssignment) else np.asarray(pi)
        if pi.size != self.n_units:
            raise DatasetError("policy assignment does not match the simulated sample")
        pi_matrix = pi.reshape(self.n_clusters, self.n_items)
        return _combine(self.a0, self.a1, pi_matrix, self.delta, self.params.mask_mode)

    def policy_value(self, assignment) -> float:
        """Exact per-cluster mean value of a policy, conditional on the sample."""
        a = self.attractiveness_under(assignment)
        return float(purchase_probability(a, self.params.eta_kind).mean())


def sample_dataset(params: SimulatorParams, seed: int) -> tuple[ClusterDataset, GroundTruth]:
    """Draw one dataset and the ground truth of its covariate/mask sample.

    Bit-identical for identical (params, seed); each randomness source owns
    a named stream, so e.g. changing the mask draw never shifts covariates.
    """
    n, m = params.n_clusters, params.n_units
    covariates = seeding.named_stream(seed, "covariates")
    x = covariates.uniform(size=(n, params.d_x))
    z = covariates.uniform(size=(n, m, params.d_z))

    treatments = seeding.named_stream(seed, "treatments")
    w = (treatments.uniform(size=(n, m)) < params.treat_prob).astype(np.int8)

    masks = seeding.named_stream(seed, "masks")
    delta = (masks.uniform(size=(n, m)) < params.mask_prob).astype(np.int8)

    x_units = np.repeat(x, m, axis=0)
    z_units = z.reshape(-1, params.d_z)
    a0 = _bilinear(x_units, params.omega_0, z_units).reshape(n, m)
    a1 = _bilinear(x_units, params.omega_1, z_units).reshape(n, m)
    a = _combine(a0, a1, w, delta, params.mask_mode)

    outcomes = seeding.named_stream(seed, "outcomes")
    eta = purchase_probability(a, params.eta_kind)
    bought = outcomes.uniform(size=n) < eta
    items = _sample_items(a, params.softmax_temperature, outcomes)
    y = np.zeros((n, m))
    y[bought, items[bought]] = 1.0

    price = params.price_base + params.price_slope * z[:, :, 0]
    c = w * y * params.discount * price

    dataset = ClusterDataset(
        x=x, z=z_units, w=w.ravel(), y=y.ravel(), c=c.ravel(),
        sizes=np.full(n, m, dtype=np.int64),
    )
    truth = GroundTruth(params=params, x=x, z=z, delta=delta, a0=a0, a1=a1)
    return dataset, truth


def true_policy_value(ground_truth: GroundTruth, assignment) -> float:
    return ground_truth.policy_value(assignment)


def true_qini_curve(
    ground_truth: GroundTruth,
    scoring_rule: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
    k: int = 10,
    *,
    scores: Optional[np.ndarray] = None,
    b_max: float = 1.0,
    tie_noise_seed: int = 0,
) -> QiniCurve:
    """Oracle curve: the threshold sweep driven by exact policy values.

    Uniform-cost regime; budgets are treated fractions scaled by ``b_max``.
    """
    if scores is None:
        if scoring_rule is None:
            raise ValueError("either a scoring rule or precomputed scores is required")
        scores = np.asarray(
            scoring_rule(ground_truth.x_units, ground_truth.z_units), dtype=np.float64
        )
    scores = check_finite_scores(scores, ground_truth.sizes)
    return threshold_sweep(
        scores,
        ground_truth.sizes,
        k,
        ground_truth.policy_value,
        b_max=b_max,
        uniform_cost=True,
        tie_noise_seed=tie_noise_seed,
        estimator_id="oracle",
    )


# ---------------------------------------------------------------------------
# Evaluation policy: expected profit of treating, optionally noise-degraded.
# ---------------------------------------------------------------------------


def unit_profit(z_units: np.ndarray, params: SimulatorParams) -> np.ndarray:
    """Per-unit profit of a converted treated item: (margin - discount) * price."""
    z_units = np.atleast_2d(np.asarray(z_units, dtype=np.float64))
    price = params.price_base + params.price_slope * z_units[:, 0]
    margin = params.margin_base + params.margin_slope * z_units[:, 1]
    return (margin - params.discount) * price


def baseline_scores(
    x_units: np.ndarray,
    z_units: np.ndarray,
    params: SimulatorParams,
    epsilon: float = 0.0,
    noise_rng: Optional[np.random.Generator] = None,
    responsiveness: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Prioritization scores: treatment uplift times unit profit.

    The uplift factor is the raw bilinear increment; passing the per-unit
    ``responsiveness`` masks zeroes it for items that cannot respond, which
    is the actual incremental conversion probability of treating.  With
    ``epsilon`` > 0 the scores are mixed with uniform noise drawn over the
    observed score range of this sample: (1 - eps) * s + eps * u.
    ``epsilon`` = 0 is the profit rule itself, 1 is pure noise.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    x_units = np.atleast_2d(np.asarray(x_units, dtype=np.float64))
    z_units = np.atleast_2d(np.asarray(z_units, dtype=np.float64))
    uplift = _bilinear(x_units, params.omega_1, z_units)
    if responsiveness is not None:
        uplift = uplift * np.asarray(responsiveness, dtype=np.float64).ravel()
    raw = uplift * unit_profit(z_units, params)
    if epsilon == 0.0:
        return raw
    if noise_rng is None:
        raise ValueError("perturbation requires a noise generator")
    noise = noise_rng.uniform(raw.min(), raw.max(), size=len(raw))
    return (1.0 - epsilon) * raw + epsilon * noise


def perturbed_score_family(
    raw_scores: np.ndarray,
    epsilons,
    noise_rng: np.random.Generator,
) -> list[np.ndarray]:
    """Noise-degraded variants of one scoring rule, sharing a single draw.

    One uniform noise vector u over the observed score range is drawn and
    mixed as (1 - eps) * s + eps * u for every epsilon, so the family
    interpolates along one path from the rule to pure noise.
    """
    raw_scores = np.asarray(raw_scores, dtype=np.float64)
    for epsilon in epsilons:
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
    if any(epsilon > 0 for epsilon in epsilons):
        noise = noise_rng.uniform(
            raw_scores.min(), raw_scores.max(), size=len(raw_scores)
        )
    else:
        noise = np.zeros_like(raw_scores)
    return [
        (1.0 - epsilon) * raw_scores + epsilon * noise for epsilon in epsilons
    ]
