"""Qini curves under clustered network interference.

Simulation of a marketplace with within-cluster cannibalization, five
weighting-based policy-value estimators, threshold-sweep Qini curve
construction, a ground-truth oracle, and a Monte Carlo experiment harness.
"""

from ._version import __version__
from .config import ConfigError, ExperimentConfig, parse_config
from .data import (
    Cluster,
    ClusterDataset,
    DatasetError,
    Policy,
    PolicyAssignment,
    PositivityError,
    PropensityModel,
    aggregate_cluster,
    assign_policy,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .estimators import (
    EstimatorSpec,
    OutcomeModel,
    SolverSettings,
    ValueEstimate,
    augmented_value,
    beta_ipw_value,
    beta_weight,
    crossfit_outcome_predictions,
    fit_outcome_model,
    frac_ipw_value,
    ipw_value,
    ipw_variance_factor,
    make_value_fn,
    naive_value,
    parse_estimator_id,
    q_weight,
)
from .metrics import (
    CalibrationReport,
    RankingReport,
    calibration,
    kendall_tau,
    rank_policies,
)
from .qini import (
    QiniCurve,
    apply_tie_break,
    auc,
    estimate_qini_curve,
    threshold_sweep,
)
from .runner import (
    CellResult,
    ExperimentFailure,
    ExperimentReport,
    RankingSummary,
    emit_plot_data,
    run_experiment,
)
from .simulator import (
    GroundTruth,
    SimulatorParams,
    attractiveness,
    baseline_scores,
    choose_item,
    purchase_probability,
    sample_dataset,
    softmax_probabilities,
    true_policy_value,
    true_qini_curve,
    unit_profit,
)

__all__ = [name for name in dir() if not name.startswith("_")]
