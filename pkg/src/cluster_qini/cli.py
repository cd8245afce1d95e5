"""Command-line entry points: simulate, qini, experiment, report."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .config import ConfigError, parse_config
from .data import (
    DatasetError,
    PropensityModel,
    read_dataset_csv,
    write_dataset_csv,
)
from .estimators import make_value_fn, parse_estimator_id
from .qini import curve_rows, threshold_sweep
from .runner import build_params, reaggregate, run_experiment
from .seeding import repetition_seed
from .simulator import ETA_KINDS, MASK_MODES, SimulatorParams, sample_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cluster-qini",
        description="Qini curve estimation and simulation under clustered "
                    "network interference",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="sample a marketplace dataset to CSV")
    sim.add_argument("--config", type=Path, help="experiment file supplying simulator params")
    sim.add_argument("--n-clusters", type=int, help="buyers (clusters)")
    sim.add_argument("--n-units", type=int, help="items per buyer (units)")
    sim.add_argument("--eta", choices=ETA_KINDS, default="exp_decay")
    sim.add_argument("--mask-mode", choices=MASK_MODES, default="increment")
    sim.add_argument("--seed", type=int, default=0, help="master seed (U64)")
    sim.add_argument("--repetition", type=int, default=0,
                     help="which repetition's dataset to emit")
    sim.add_argument("--out", type=Path, required=True, help="dataset CSV path")
    sim.set_defaults(func=_cmd_simulate)

    qin = sub.add_parser("qini", help="estimate a Qini curve for a dataset + scores")
    qin.add_argument("--dataset", type=Path, required=True, help="dataset CSV")
    qin.add_argument("--scores", type=Path, required=True,
                     help="CSV with columns cluster_id,unit_id,score (dataset row order)")
    qin.add_argument("--estimator", required=True,
                     help="naive | ipw | frac_ipw | beta_ipw:<b> | aug_ipw | aug_beta_ipw:<b>")
    qin.add_argument("--k", type=int, default=10, help="number of grid percentiles")
    qin.add_argument("--treat-prob", type=float, default=0.5,
                     help="known randomized-design treatment probability")
    qin.add_argument("--channel", choices=("outcome", "cost"), default="outcome")
    qin.add_argument("--b-max", type=float, default=1.0)
    qin.add_argument("--seed", type=int, default=0, help="tie-break noise seed")
    qin.add_argument("--out", type=Path, required=True, help="curve CSV path")
    qin.set_defaults(func=_cmd_qini)

    exp = sub.add_parser("experiment", help="run a full experiment from a config file")
    exp.add_argument("--config", type=Path, required=True)
    exp.add_argument("--seed", type=int, help="override the config master seed")
    exp.add_argument("--workers", type=int, help="override the config worker count")
    exp.add_argument("--out", type=Path, required=True, help="output directory")
    exp.add_argument("--keep-going", action="store_true",
                     help="aggregate successful repetitions even if some fail")
    exp.add_argument("--split-curves", action="store_true",
                     help="one curve file per (estimator, policy, repetition)")
    exp.set_defaults(func=_cmd_experiment)

    rep = sub.add_parser("report", help="re-aggregate raw curve CSVs in a run directory")
    rep.add_argument("--out", type=Path, required=True, help="existing run directory")
    rep.set_defaults(func=_cmd_report)
    return parser


def _cmd_simulate(args) -> int:
    if args.config is not None:
        config = parse_config(args.config)
        if args.seed != 0:
            config.seed = args.seed
        params = build_params(config)
    else:
        if args.n_clusters is None or args.n_units is None:
            raise ConfigError("simulate needs either --config or --n-clusters/--n-units")
        params = SimulatorParams.sampled(
            args.n_clusters, args.n_units, seed=args.seed,
            eta_kind=args.eta, mask_mode=args.mask_mode,
        )
    dataset, _ = sample_dataset(params, repetition_seed(params.seed, args.repetition))
    write_dataset_csv(dataset, args.out)
    print(f"wrote {dataset.n_clusters} clusters / {dataset.n_units} units to {args.out}")
    return 0


def _read_scores(path: Path, n_units: int) -> np.ndarray:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["cluster_id", "unit_id", "score"]:
            raise DatasetError(f"{path}: expected header cluster_id,unit_id,score")
        scores = [float(row[2]) for row in reader]
    if len(scores) != n_units:
        raise DatasetError(
            f"{path}: {len(scores)} scores for a dataset of {n_units} units"
        )
    return np.asarray(scores)


def _cmd_qini(args) -> int:
    parse_estimator_id(args.estimator)
    dataset = read_dataset_csv(args.dataset)
    scores = _read_scores(args.scores, dataset.n_units)
    propensity = PropensityModel.constant(args.treat_prob)
    value_fn = make_value_fn(args.estimator, dataset, propensity, args.channel)
    curve = threshold_sweep(
        scores, dataset.sizes, args.k, value_fn,
        b_max=args.b_max, tie_noise_seed=args.seed, estimator_id=args.estimator,
    )
    with open(args.out, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["k", "budget", "qini", "estimator_id", "seed", "repetition"])
        for row in curve_rows(curve, args.seed, 0):
            writer.writerow([row[0], repr(row[1]), repr(row[2]), row[3], row[4], row[5]])
    print(f"wrote {curve.k + 1} curve points to {args.out}")
    return 0


def _cmd_experiment(args) -> int:
    config = parse_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    config.keep_going = args.keep_going
    config.split_curves = args.split_curves
    config.validate()
    run_experiment(config, out_dir=args.out)
    return 0


def _cmd_report(args) -> int:
    reaggregate(args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
