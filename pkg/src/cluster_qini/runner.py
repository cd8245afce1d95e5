"""Experiment orchestration: parallel repetitions, aggregation, output files.

Parallelism is at repetition granularity; every repetition owns its seed
streams, so outputs are byte-identical for any worker count.  Raw
per-repetition curves, aggregated metrics, plot-ready panel CSVs, rendered
figures, and a manifest are written to the output directory.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np

from ._version import __version__
from .config import ConfigError, ExperimentConfig, load_omega
from .data import PropensityModel
from .estimators import make_value_fn
from .metrics import CalibrationReport, calibration, kendall_tau
from .qini import QiniCurve, auc, prepare_assignments
from .seeding import derive, named_stream, repetition_seed
from .simulator import (
    SimulatorParams,
    baseline_scores,
    perturbed_score_family,
    sample_dataset,
)

RAW_CURVES_FILE = "curves_raw.csv"
ORACLE_ID = "oracle"


class ExperimentFailure(RuntimeError):
    """One or more repetitions failed and --keep-going was not set."""


def _fmt(value: float) -> str:
    return repr(float(value))


@dataclass
class CellResult:
    """Curves and calibration for one (n_clusters, n_units) grid cell."""

    n_clusters: int
    n_units: int
    budgets: np.ndarray                      # (K+1,)
    repetitions: list[int]
    seeds: list[int]
    truth: np.ndarray                        # (R, P, K+1)
    curves: dict[str, np.ndarray]            # estimator id -> (R, P, K+1)
    calibration: dict[str, CalibrationReport] = field(default_factory=dict)


@dataclass
class RankingSummary:
    """Per-repetition policy AUCs and rank agreement per estimator."""

    epsilons: list[float]
    true_auc: np.ndarray                     # (R, P)
    estimated_auc: dict[str, np.ndarray]     # estimator id -> (R, P)
    tau: dict[str, np.ndarray]               # estimator id -> (R,)
    tau_mean: dict[str, float] = field(default_factory=dict)
    tau_se: dict[str, float] = field(default_factory=dict)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    config_hash: str
    cells: list[CellResult]
    ranking: Optional[RankingSummary]
    failures: list[dict]
    wall_clock_seconds: float
    out_dir: Optional[Path] = None
    output_files: list[str] = field(default_factory=list)


def build_params(config: ExperimentConfig) -> SimulatorParams:
    """Simulator parameters for a config; coefficient matrices are sampled
    once per experiment from the master seed, or loaded from CSV fixtures."""
    common = dict(
        eta_kind=config.eta_kind,
        softmax_temperature=config.softmax_temperature,
        treat_prob=config.treat_prob,
        mask_prob=config.mask_prob,
        mask_mode=config.mask_mode,
        price_base=config.price_base,
        price_slope=config.price_slope,
        margin_base=config.margin_base,
        margin_slope=config.margin_slope,
        discount=config.discount,
        seed=config.seed,
    )
    if (config.omega_csv_0 is None) != (config.omega_csv_1 is None):
        raise ConfigError("omega_csv_0 and omega_csv_1 must be given together")
    if config.omega_csv_0 is not None:
        return SimulatorParams(
            n_clusters=config.n_clusters,
            n_units=config.n_units,
            omega_0=load_omega(config.omega_csv_0),
            omega_1=load_omega(config.omega_csv_1),
            **common,
        )
    seed = common.pop("seed")
    return SimulatorParams.sampled(
        config.n_clusters,
        config.n_units,
        seed=seed,
        omega_scale=config.omega_scale,
        **common,
    )


def _run_repetition(task: tuple) -> dict:
    """One repetition: sample, score policies, sweep every estimator."""
    (params, epsilons, qini_k, b_max, estimator_ids, folds,
     score_uses_mask, master_seed, rep) = task
    started = time.monotonic()
    seed = repetition_seed(master_seed, rep)
    dataset, truth = sample_dataset(params, seed)
    propensity = PropensityModel.constant(params.treat_prob)
    fold_seed = derive(seed, "folds")
    value_fns = {
        estimator_id: make_value_fn(
            estimator_id, dataset, propensity, "outcome", folds, fold_seed
        )
        for estimator_id in estimator_ids
    }

    n_policies = len(epsilons)
    truth_curves = np.zeros((n_policies, qini_k + 1))
    est_curves = {e: np.zeros((n_policies, qini_k + 1)) for e in estimator_ids}
    # Noise degradations share one draw per repetition so the policy family
    # interpolates along a single path from the profit rule to pure noise.
    raw_scores = baseline_scores(
        truth.x_units, truth.z_units, params,
        responsiveness=truth.delta if score_uses_mask else None,
    )
    score_family = perturbed_score_family(
        raw_scores, epsilons, named_stream(seed, "policy_noise")
    )
    for p_idx, scores in enumerate(score_family):
        tie_seed = derive(seed, f"tie_break:{p_idx}")
        assignments = prepare_assignments(scores, dataset.sizes, qini_k, tie_seed)
        oracle_values = [truth.policy_value(a) for a in assignments]
        truth_curves[p_idx, 1:] = np.array(oracle_values[1:]) - oracle_values[0]
        for estimator_id, value_fn in value_fns.items():
            values = [value_fn(a) for a in assignments]
            est_curves[estimator_id][p_idx, 1:] = np.array(values[1:]) - values[0]
    return {
        "rep": rep,
        "seed": seed,
        "truth": truth_curves,
        "curves": est_curves,
        "elapsed": time.monotonic() - started,
    }


def _run_repetition_safe(task: tuple) -> dict:
    try:
        return _run_repetition(task)
    except Exception as exc:  # noqa: BLE001 - repetition failures are data
        master_seed, rep = task[-2], task[-1]
        return {
            "rep": rep,
            "seed": repetition_seed(master_seed, rep),
            "error": f"{type(exc).__name__}: {exc}",
        }


def _execute(tasks: list[tuple], workers: int) -> list[dict]:
    if workers <= 1 or len(tasks) <= 1:
        return [_log_progress(_run_repetition_safe(t), len(tasks)) for t in tasks]
    context = get_context("spawn")
    with context.Pool(processes=workers) as pool:
        return [
            _log_progress(result, len(tasks))
            for result in pool.imap(_run_repetition_safe, tasks)
        ]


def _log_progress(result: dict, total: int) -> dict:
    if "error" in result:
        print(
            f"repetition {result['rep']} failed (seed {result['seed']}): "
            f"{result['error']}",
            file=sys.stderr,
        )
    else:
        print(
            f"repetition {result['rep'] + 1}/{total} done "
            f"in {result['elapsed']:.2f}s (seed {result['seed']})",
            file=sys.stderr,
        )
    return result


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """Run every repetition of every grid cell and aggregate the results.

    Deterministic given the config: the master seed owns one seed per
    repetition regardless of worker count or cell order.
    """
    started = time.monotonic()
    base_params = build_params(config)
    budgets = np.arange(config.qini_k + 1) / config.qini_k * config.b_max
    cells: list[CellResult] = []
    failures: list[dict] = []
    for n_clusters, n_units in config.cells():
        params = base_params.with_shape(n_clusters, n_units)
        print(f"cell n_clusters={n_clusters} n_units={n_units}", file=sys.stderr)
        tasks = [
            (
                params,
                tuple(config.epsilons),
                config.qini_k,
                config.b_max,
                tuple(config.estimators),
                config.folds,
                config.score_uses_mask,
                config.seed,
                rep,
            )
            for rep in range(config.repetitions)
        ]
        results = _execute(tasks, config.workers)
        good = [r for r in results if "error" not in r]
        failures += [
            {"n_clusters": n_clusters, "n_units": n_units,
             "rep": r["rep"], "seed": r["seed"], "error": r["error"]}
            for r in results if "error" in r
        ]
        if not good:
            raise ExperimentFailure(
                f"every repetition failed in cell ({n_clusters}, {n_units}); "
                f"first error: {failures[-1]['error']}"
            )
        truth = np.stack([r["truth"] for r in good])
        curves = {
            estimator_id: np.stack([r["curves"][estimator_id] for r in good])
            for estimator_id in config.estimators
        }
        cell = CellResult(
            n_clusters=n_clusters,
            n_units=n_units,
            budgets=budgets,
            repetitions=[r["rep"] for r in good],
            seeds=[r["seed"] for r in good],
            truth=truth,
            curves=curves,
        )
        if config.kind != "ranking":
            cell.calibration = {
                estimator_id: calibration(curves[estimator_id][:, 0, :], truth[:, 0, :])
                for estimator_id in config.estimators
            }
        cells.append(cell)

    ranking = _summarize_ranking(config, cells[0]) if config.kind == "ranking" else None
    report = ExperimentReport(
        config=config,
        config_hash=config.config_hash(),
        cells=cells,
        ranking=ranking,
        failures=failures,
        wall_clock_seconds=time.monotonic() - started,
    )
    destination = out_dir if out_dir is not None else config.out_dir
    if destination is not None:
        write_outputs(report, Path(destination))
    _print_summary(report)
    if failures and not config.keep_going:
        raise ExperimentFailure(
            f"{len(failures)} repetition(s) failed; rerun with --keep-going "
            "to aggregate the successful ones"
        )
    return report


def _curve_auc(budgets: np.ndarray, values: np.ndarray, b_max: float) -> float:
    return auc(QiniCurve(budgets, values, uniform_cost=True, b_max=b_max))


def _summarize_ranking(config: ExperimentConfig, cell: CellResult) -> RankingSummary:
    r = len(cell.repetitions)
    n_policies = len(config.epsilons)
    true_auc = np.zeros((r, n_policies))
    est_auc = {e: np.zeros((r, n_policies)) for e in config.estimators}
    for rep in range(r):
        for p_idx in range(n_policies):
            true_auc[rep, p_idx] = _curve_auc(
                cell.budgets, cell.truth[rep, p_idx], config.b_max
            )
            for estimator_id in config.estimators:
                est_auc[estimator_id][rep, p_idx] = _curve_auc(
                    cell.budgets, cell.curves[estimator_id][rep, p_idx], config.b_max
                )
    tau = {
        estimator_id: np.array(
            [kendall_tau(true_auc[rep], est_auc[estimator_id][rep]) for rep in range(r)]
        )
        for estimator_id in config.estimators
    }
    summary = RankingSummary(
        epsilons=list(config.epsilons),
        true_auc=true_auc,
        estimated_auc=est_auc,
        tau=tau,
    )
    for estimator_id, values in tau.items():
        summary.tau_mean[estimator_id] = float(values.mean())
        summary.tau_se[estimator_id] = (
            float(values.std(ddof=1) / np.sqrt(r)) if r > 1 else float("nan")
        )
    return summary


# ---------------------------------------------------------------------------
# Output files.
# ---------------------------------------------------------------------------


def write_outputs(report: ExperimentReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report.out_dir = out_dir
    written: list[str] = []
    if report.config.split_curves:
        written += _write_split_curves(report, out_dir)
    else:
        _write_tall_curves(report, out_dir / RAW_CURVES_FILE)
        written.append(RAW_CURVES_FILE)
    if report.config.kind == "ranking":
        _write_ranking_csvs(report, out_dir)
        written += ["ranking_raw.csv", "ranking.csv"]
    else:
        _write_calibration_csv(report, out_dir / "calibration.csv")
        written.append("calibration.csv")
    written += [p.name for p in emit_plot_data(report, out_dir)]
    try:
        from . import plots

        written += [p.name for p in plots.render_panels(out_dir)]
    except ImportError as exc:  # matplotlib missing: keep the data outputs
        print(f"figure rendering skipped: {exc}", file=sys.stderr)
    _write_manifest(report, out_dir, written)
    report.output_files = written + ["manifest.json"]


def _iter_curve_records(report: ExperimentReport):
    epsilons = report.config.epsilons
    for cell in report.cells:
        for r_idx, (rep, seed) in enumerate(zip(cell.repetitions, cell.seeds)):
            for p_idx, epsilon in enumerate(epsilons):
                yield cell, rep, seed, epsilon, ORACLE_ID, cell.truth[r_idx, p_idx]
                for estimator_id in report.config.estimators:
                    yield (
                        cell, rep, seed, epsilon, estimator_id,
                        cell.curves[estimator_id][r_idx, p_idx],
                    )


def _write_tall_curves(report: ExperimentReport, path: Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["n_clusters", "n_units", "repetition", "seed", "estimator_id",
             "policy_epsilon", "k", "budget", "qini"]
        )
        for cell, rep, seed, epsilon, estimator_id, values in _iter_curve_records(report):
            for k, (budget, value) in enumerate(zip(cell.budgets, values)):
                writer.writerow(
                    [cell.n_clusters, cell.n_units, rep, seed, estimator_id,
                     _fmt(epsilon), k, _fmt(budget), _fmt(value)]
                )


def _write_split_curves(report: ExperimentReport, out_dir: Path) -> list[str]:
    curves_dir = out_dir / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for cell, rep, seed, epsilon, estimator_id, values in _iter_curve_records(report):
        name = (
            f"cell{cell.n_clusters}x{cell.n_units}__eps{_fmt(epsilon)}"
            f"__{estimator_id.replace(':', '-')}__rep{rep}.csv"
        )
        with open(curves_dir / name, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["k", "budget", "qini", "estimator_id", "seed", "repetition"])
            for k, (budget, value) in enumerate(zip(cell.budgets, values)):
                writer.writerow([k, _fmt(budget), _fmt(value), estimator_id, seed, rep])
        names.append(f"curves/{name}")
    return names


def _write_calibration_csv(report: ExperimentReport, path: Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["n_clusters", "n_units", "estimator_id", "metric", "value", "stderr"]
        )
        for cell in report.cells:
            for estimator_id, summary in cell.calibration.items():
                rows = (
                    ("bias", summary.bias, summary.se_bias),
                    ("variance", summary.variance, summary.se_variance),
                    ("mse", summary.mse, summary.se_mse),
                )
                for metric, value, stderr in rows:
                    writer.writerow(
                        [cell.n_clusters, cell.n_units, estimator_id, metric,
                         _fmt(value), _fmt(stderr)]
                    )


def _write_ranking_csvs(report: ExperimentReport, out_dir: Path) -> None:
    ranking = report.ranking
    cell = report.cells[0]
    with open(out_dir / "ranking_raw.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["repetition", "seed", "policy_epsilon", "estimator_id", "auc"])
        for r_idx, (rep, seed) in enumerate(zip(cell.repetitions, cell.seeds)):
            for p_idx, epsilon in enumerate(ranking.epsilons):
                writer.writerow(
                    [rep, seed, _fmt(epsilon), ORACLE_ID,
                     _fmt(ranking.true_auc[r_idx, p_idx])]
                )
                for estimator_id in report.config.estimators:
                    writer.writerow(
                        [rep, seed, _fmt(epsilon), estimator_id,
                         _fmt(ranking.estimated_auc[estimator_id][r_idx, p_idx])]
                    )
    with open(out_dir / "ranking.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["estimator_id", "kendall_tau_mean", "kendall_tau_se", "repetitions"])
        for estimator_id in report.config.estimators:
            writer.writerow(
                [estimator_id, _fmt(ranking.tau_mean[estimator_id]),
                 _fmt(ranking.tau_se[estimator_id]), len(cell.repetitions)]
            )


def emit_plot_data(report: ExperimentReport, out_dir: Path) -> list[Path]:
    """Tall plot-ready CSVs keyed by (x, estimator, mean, stderr)."""
    out_dir = Path(out_dir)
    files: list[Path] = []
    config = report.config
    if config.kind == "ranking":
        path = out_dir / "panel_tau.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["estimator_id", "mean", "stderr"])
            for estimator_id in config.estimators:
                writer.writerow(
                    [estimator_id, _fmt(report.ranking.tau_mean[estimator_id]),
                     _fmt(report.ranking.tau_se[estimator_id])]
                )
        return [path]

    if len(report.cells) == 1:
        cell = report.cells[0]
        r = len(cell.repetitions)
        path = out_dir / "panel_budget_qini.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["budget", "estimator_id", "mean", "stderr"])
            series = {ORACLE_ID: cell.truth[:, 0, :], **{
                e: cell.curves[e][:, 0, :] for e in config.estimators
            }}
            for estimator_id, stack in series.items():
                mean = stack.mean(axis=0)
                stderr = (
                    stack.std(axis=0, ddof=1) / np.sqrt(r) if r > 1
                    else np.full(stack.shape[1], np.nan)
                )
                for k, budget in enumerate(cell.budgets):
                    writer.writerow(
                        [_fmt(budget), estimator_id, _fmt(mean[k]), _fmt(stderr[k])]
                    )
        files.append(path)

    if len(report.cells) > 1:
        axis = "m" if config.sweep_m else "n"
        for metric in ("bias", "mse", "variance"):
            path = out_dir / f"panel_{metric}_vs_{axis}.csv"
            with open(path, "w", newline="") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow([axis, "estimator_id", "mean", "stderr"])
                for cell in report.cells:
                    x = cell.n_units if axis == "m" else cell.n_clusters
                    for estimator_id in config.estimators:
                        summary = cell.calibration[estimator_id]
                        value = getattr(summary, metric)
                        stderr = getattr(summary, f"se_{metric}")
                        writer.writerow([x, estimator_id, _fmt(value), _fmt(stderr)])
            files.append(path)
    return files


def _write_manifest(report: ExperimentReport, out_dir: Path, outputs: list[str]) -> None:
    manifest = {
        "config_hash": report.config_hash,
        "master_seed": report.config.seed,
        "code_version": __version__,
        "wall_clock_seconds": report.wall_clock_seconds,
        "created_unix": time.time(),
        "kind": report.config.kind,
        "config": {
            **report.config.numeric_fields(),
            "workers": report.config.workers,
            "split_curves": report.config.split_curves,
        },
        "outputs": outputs,
        "failures": report.failures,
    }
    with open(out_dir / "manifest.json", "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _print_summary(report: ExperimentReport) -> None:
    config = report.config
    print(f"experiment kind={config.kind} hash={report.config_hash[:12]}")
    if config.kind == "ranking":
        print(f"{'estimator':<16} {'kendall tau':>12} {'stderr':>10}")
        for estimator_id in config.estimators:
            print(
                f"{estimator_id:<16} {report.ranking.tau_mean[estimator_id]:>12.3f} "
                f"{report.ranking.tau_se[estimator_id]:>10.3f}"
            )
        return
    for cell in report.cells:
        print(f"n_clusters={cell.n_clusters} n_units={cell.n_units} "
              f"repetitions={len(cell.repetitions)}")
        print(f"{'estimator':<16} {'bias':>18} {'variance':>18} {'mse':>18}")
        for estimator_id in config.estimators:
            summary = cell.calibration[estimator_id]
            print(
                f"{estimator_id:<16} "
                f"{summary.bias:>10.4f} ({summary.se_bias:.4f}) "
                f"{summary.variance:>10.4f} ({summary.se_variance:.4f}) "
                f"{summary.mse:>10.4f} ({summary.se_mse:.4f})"
            )


# ---------------------------------------------------------------------------
# Re-aggregation of previously written raw curves.
# ---------------------------------------------------------------------------


def reaggregate(out_dir) -> ExperimentReport:
    """Rebuild aggregated CSVs, panels, and figures from raw curve files."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json in {out_dir}")
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    stored = dict(manifest["config"])
    stored.pop("split_curves", None)
    config = ExperimentConfig(**stored)

    records = list(_read_raw_curves(out_dir))
    if not records:
        raise ConfigError(f"no raw curve rows found in {out_dir}")
    config = config  # cells regrouped from the raw rows themselves
    grouped: dict[tuple[int, int], dict] = {}
    for n_clusters, n_units, rep, seed, estimator_id, epsilon, k, budget, value in records:
        cell = grouped.setdefault(
            (n_clusters, n_units),
            {"reps": {}, "budgets": {}},
        )
        curve = cell["reps"].setdefault((rep, seed), {}).setdefault(
            (estimator_id, epsilon), {}
        )
        curve[k] = value
        cell["budgets"][k] = budget

    epsilons = config.epsilons
    cells = []
    for (n_clusters, n_units), blob in sorted(grouped.items()):
        budgets = np.array([blob["budgets"][k] for k in sorted(blob["budgets"])])
        reps = sorted(blob["reps"])
        truth = np.zeros((len(reps), len(epsilons), len(budgets)))
        curves = {
            e: np.zeros((len(reps), len(epsilons), len(budgets)))
            for e in config.estimators
        }
        for r_idx, key in enumerate(reps):
            per_rep = blob["reps"][key]
            for p_idx, epsilon in enumerate(epsilons):
                for estimator_id, target in [(ORACLE_ID, truth)] + [
                    (e, curves[e]) for e in config.estimators
                ]:
                    points = per_rep[(estimator_id, epsilon)]
                    target[r_idx, p_idx] = [points[k] for k in sorted(points)]
        cell = CellResult(
            n_clusters=n_clusters,
            n_units=n_units,
            budgets=budgets,
            repetitions=[rep for rep, _ in reps],
            seeds=[seed for _, seed in reps],
            truth=truth,
            curves=curves,
        )
        if config.kind != "ranking":
            cell.calibration = {
                e: calibration(curves[e][:, 0, :], truth[:, 0, :])
                for e in config.estimators
            }
        cells.append(cell)

    report = ExperimentReport(
        config=config,
        config_hash=manifest["config_hash"],
        cells=cells,
        ranking=None,
        failures=manifest.get("failures", []),
        wall_clock_seconds=0.0,
        out_dir=out_dir,
    )
    if config.kind == "ranking":
        report.ranking = _summarize_ranking(config, cells[0])
        _write_ranking_csvs(report, out_dir)
    else:
        _write_calibration_csv(report, out_dir / "calibration.csv")
    emit_plot_data(report, out_dir)
    try:
        from . import plots

        plots.render_panels(out_dir)
    except ImportError as exc:
        print(f"figure rendering skipped: {exc}", file=sys.stderr)
    _print_summary(report)
    return report


def _read_raw_curves(out_dir: Path):
    tall = out_dir / RAW_CURVES_FILE
    if tall.exists():
        with open(tall, newline="") as handle:
            reader = csv.DictReader(handle)
            for row in reader:
                yield (
                    int(row["n_clusters"]), int(row["n_units"]),
                    int(row["repetition"]), int(row["seed"]),
                    row["estimator_id"], float(row["policy_epsilon"]),
                    int(row["k"]), float(row["budget"]), float(row["qini"]),
                )
        return
    curves_dir = out_dir / "curves"
    for path in sorted(curves_dir.glob("*.csv")) if curves_dir.exists() else []:
        stem_parts = path.stem.split("__")
        cell_part = stem_parts[0].removeprefix("cell")
        n_clusters, n_units = (int(v) for v in cell_part.split("x"))
        epsilon = float(stem_parts[1].removeprefix("eps"))
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            for row in reader:
                yield (
                    n_clusters, n_units, int(row["repetition"]), int(row["seed"]),
                    row["estimator_id"], epsilon, int(row["k"]),
                    float(row["budget"]), float(row["qini"]),
                )
