"""Acceptance suite: one test per acceptance criterion, desk scale.

Each criterion prints a single PASS/FAIL line (written past pytest's
capture so it always lands in the console/log).  Criteria 5-11 drive the
real experiment runner with the shipped preset configurations or pinned
desk-scale settings; criteria 1-4 are exact enumeration checks.
"""

import contextlib
import io
import itertools
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cluster_qini.config import ExperimentConfig, parse_config
from cluster_qini.data import ClusterDataset, PolicyAssignment, PropensityModel
from cluster_qini.estimators import (
    beta_ipw_value,
    beta_weight,
    frac_ipw_value,
    ipw_value,
    q_weight,
)
from cluster_qini.runner import run_experiment

from conftest import config_probability, enumerate_treatments

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _emit(number, name, passed, detail):
    verdict = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {number:>2} {name}: {verdict} ({detail})", file=sys.__stdout__)
    sys.__stdout__.flush()
    return passed


def _run(config):
    with contextlib.redirect_stderr(io.StringIO()), contextlib.redirect_stdout(io.StringIO()):
        return run_experiment(config)


# ---------------------------------------------------------------------------
# 1-4: exact enumeration checks.
# ---------------------------------------------------------------------------


def test_criterion_1_fraction_weight_enumeration():
    started = time.monotonic()
    worst = 0.0
    for m in range(1, 7):
        configs = enumerate_treatments(m)
        for e1 in (0.2, 0.5, 0.8):
            probs = np.array([config_probability(w, e1) for w in configs])
            counts = np.array([int(w.sum()) for w in configs])
            stacked = np.stack(configs)
            for pi in enumerate_treatments(m):
                k = int(pi.sum())
                in_fraction = counts == k
                for j in range(m):
                    brute = float(probs[(stacked[:, j] == pi[j]) & in_fraction].sum())
                    got = q_weight(int(pi[j]), k / m, m, e1)
                    worst = max(worst, abs(got - brute))
    elapsed = time.monotonic() - started
    ok = worst <= 1e-12 and elapsed < 1.0
    assert _emit(1, "fraction-weight enumeration", ok,
                 f"max abs err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_full_order_collapse():
    started = time.monotonic()
    rng = np.random.default_rng(20250601)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        sizes = rng.integers(1, 6, size=n)
        n_units = int(sizes.sum())
        ds = ClusterDataset(
            x=rng.uniform(size=(n, 2)),
            z=rng.uniform(size=(n_units, 2)),
            w=rng.integers(0, 2, n_units),
            y=rng.normal(size=n_units),
            c=np.zeros(n_units),
            sizes=sizes,
        )
        assignment = PolicyAssignment(rng.integers(0, 2, n_units), sizes)
        propensity = PropensityModel(lambda x: 0.2 + 0.6 * x[:, 0])
        full_order = int(sizes.max())
        collapsed = beta_ipw_value(ds, assignment, propensity, full_order).value
        reference = ipw_value(ds, assignment, propensity).value
        worst = max(worst, abs(collapsed - reference))
    elapsed = time.monotonic() - started
    ok = worst <= 1e-9 and elapsed < 5.0
    assert _emit(2, "full-order collapse on 1000 datasets", ok,
                 f"max abs err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_3_unit_weight_expectation():
    started = time.monotonic()
    rng = np.random.default_rng(20250602)
    worst = 0.0
    for m in range(1, 7):
        configs = enumerate_treatments(m)
        for e1 in (0.2, 0.5, 0.8):
            pi = rng.integers(0, 2, m).astype(np.int8)
            e_pi = np.where(pi == 1, e1, 1 - e1)
            expectation = sum(
                config_probability(w, e1) * float(np.all(w == pi)) / np.prod(e_pi)
                for w in configs
            )
            worst = max(worst, abs(expectation - 1.0))
            for beta in sorted({1, 2, m}):
                expectation = sum(
                    config_probability(w, e1) * beta_weight(w, pi, e1, beta)
                    for w in configs
                )
                worst = max(worst, abs(expectation - 1.0))
    elapsed = time.monotonic() - started
    ok = worst <= 1e-12 and elapsed < 5.0
    assert _emit(3, "unit conditional weight expectation", ok,
                 f"max abs dev {worst:.2e}, {elapsed:.2f}s")


def _exact_expectation(estimate_fn, pi, e1, table):
    m = len(pi)
    assignment = PolicyAssignment(pi, [m])
    propensity = PropensityModel.constant(e1)
    total = 0.0
    for w in enumerate_treatments(m):
        ds = ClusterDataset(
            x=np.full((1, 2), 0.5), z=np.zeros((m, 1)), w=w,
            y=table[tuple(w)], c=np.zeros(m), sizes=[m],
        )
        total += config_probability(w, e1) * estimate_fn(ds, assignment, propensity).value
    return total


def test_criterion_4_exact_unbiasedness_tables():
    started = time.monotonic()
    rng = np.random.default_rng(20250603)
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(1, 4))
        e1 = float(rng.choice([0.2, 0.5, 0.8]))
        pi = rng.integers(0, 2, m).astype(np.int8)

        arbitrary = {tuple(w): rng.normal(size=m) for w in enumerate_treatments(m)}
        worst = max(worst, abs(
            _exact_expectation(ipw_value, pi, e1, arbitrary)
            - float(np.sum(arbitrary[tuple(pi)]))
        ))

        coef = rng.normal(size=(m, 2, m + 1))
        fractional = {
            tuple(w): np.array([coef[j, w[j], int(np.sum(w))] for j in range(m)])
            for w in enumerate_treatments(m)
        }
        worst = max(worst, abs(
            _exact_expectation(frac_ipw_value, pi, e1, fractional)
            - float(np.sum(fractional[tuple(pi)]))
        ))

        base, linear = rng.normal(size=m), rng.normal(size=(m, m))
        additive = {
            tuple(w): base + linear @ np.asarray(w) for w in enumerate_treatments(m)
        }
        worst = max(worst, abs(
            _exact_expectation(lambda d, a, p: beta_ipw_value(d, a, p, 1), pi, e1, additive)
            - float(np.sum(additive[tuple(pi)]))
        ))
    elapsed = time.monotonic() - started
    ok = worst <= 1e-12 and elapsed < 1.0
    assert _emit(4, "exact expectation on outcome tables", ok,
                 f"max abs err {worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 5-11: Monte Carlo reproductions at desk scale.
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def figure1_report():
    return _run(parse_config(CONFIGS / "figure1.cfg"))


def test_criterion_5_curve_comparison(figure1_report):
    started = time.monotonic()
    cell = figure1_report.cells[0]
    truth = cell.truth[:, 0, :]
    naive = cell.curves["naive"][:, 0, :]
    ipw = cell.curves["ipw"][:, 0, :]
    naive_above = bool((naive.mean(0)[1:-1] > truth.mean(0)[1:-1]).all())
    diff = ipw - truth
    se = diff.std(0, ddof=1) / np.sqrt(len(diff))
    within = np.abs(diff.mean(0)) <= 2 * np.where(se > 0, se, np.inf)
    within[0] = diff.mean(0)[0] == 0.0  # origin is identically zero
    ipw_ok = bool(within.all())
    elapsed = time.monotonic() - started
    ok = naive_above and ipw_ok
    assert _emit(5, "curve comparison at desk scale", ok,
                 f"naive above interior: {naive_above}, "
                 f"ipw max |z| {np.max(np.abs(diff.mean(0)[1:] / se[1:])):.2f}, "
                 f"R={len(diff)}, {elapsed:.2f}s")


@pytest.fixture(scope="module")
def calibration_sweep_report():
    return _run(parse_config(CONFIGS / "calibration_small.cfg"))


def test_criterion_6_bias_and_mse_trends(calibration_sweep_report):
    cells = calibration_sweep_report.cells
    naive_bias = [c.calibration["naive"].bias for c in cells]
    naive_ok = naive_bias[0] > 0 and naive_bias[0] < naive_bias[1] < naive_bias[2]
    ipw_ok = all(
        abs(c.calibration["ipw"].bias) <= 2 * c.calibration["ipw"].se_bias
        for c in cells
    )
    at_11 = cells[-1].calibration
    mse_ok = (
        at_11["beta_ipw:1"].mse < at_11["frac_ipw"].mse < at_11["ipw"].mse
    )
    ok = naive_ok and ipw_ok and mse_ok
    assert _emit(6, "bias/MSE trends versus cluster size", ok,
                 f"naive bias {np.round(naive_bias, 3).tolist()}, "
                 f"ipw within 2se: {ipw_ok}, "
                 f"mse@11 b1={at_11['beta_ipw:1'].mse:.4f} "
                 f"frac={at_11['frac_ipw'].mse:.4f} ipw={at_11['ipw'].mse:.4f}")


@pytest.fixture(scope="module")
def variance_cell_report():
    config = ExperimentConfig(
        kind="calibration",
        estimators=["naive", "beta_ipw:1", "beta_ipw:2", "frac_ipw", "ipw", "aug_ipw"],
        n_clusters=20000, n_units=11, repetitions=30,
        eta_kind="exp_decay", seed=20250503, workers=2,
    )
    return _run(config)


def test_criterion_7_variance_ordering(variance_cell_report):
    cal = variance_cell_report.cells[0].calibration
    chain = ["naive", "beta_ipw:1", "beta_ipw:2", "frac_ipw", "ipw"]
    variances = [cal[e].variance for e in chain]
    ordered = all(a <= b for a, b in zip(variances, variances[1:]))
    flags = []
    for (left, right), (va, vb) in zip(
        itertools.pairwise(chain), itertools.pairwise(variances)
    ):
        if not va <= 0.8 * vb:  # a 20% margin
            flags.append(f"{left}<={right} margin {1 - va / vb:.0%}")
    detail = ", ".join(f"{e}={v:.5f}" for e, v in zip(chain, variances))
    if flags:
        detail += "; flagged: " + "; ".join(flags)
    assert _emit(7, "variance ordering with margins", ordered, detail)


def test_criterion_9_augmentation(variance_cell_report):
    cell = variance_cell_report.cells[0]
    cal = cell.calibration
    ratio = cal["aug_ipw"].variance / cal["ipw"].variance
    variance_ok = ratio <= 0.95
    paired = (cell.curves["aug_ipw"][:, 0, 1:] - cell.truth[:, 0, 1:]).mean(1) \
        - (cell.curves["ipw"][:, 0, 1:] - cell.truth[:, 0, 1:]).mean(1)
    se = paired.std(ddof=1) / np.sqrt(len(paired))
    bias_ok = abs(paired.mean()) <= 2 * se
    ok = variance_ok and bias_ok
    assert _emit(9, "augmented weighting", ok,
                 f"variance ratio {ratio:.3f} (<= 0.95), "
                 f"bias diff {paired.mean():+.4f} vs 2se {2 * se:.4f}")


@pytest.fixture(scope="module")
def ranking_reports():
    reports = {}
    for eta in ("max", "product", "exp_decay"):
        config = parse_config(CONFIGS / "ranking.cfg")
        config.eta_kind = eta
        config.estimators = ["naive", "beta_ipw:1"]
        config.validate()
        reports[eta] = _run(config)
    return reports


def test_criterion_8_rank_discrimination(ranking_reports):
    taus = {eta: r.ranking.tau_mean["beta_ipw:1"] for eta, r in ranking_reports.items()}
    ok = all(t >= 0.95 for t in taus.values())
    assert _emit(8, "rank discrimination (order-1 weighting)", ok,
                 "beta_ipw:1 tau " + ", ".join(f"{k}={v:.3f}" for k, v in taus.items()))


def test_criterion_8_naive_strictly_below_on_product(ranking_reports):
    # Unattained: in this data-generating process the per-unit estimator's
    # inflation moves with the policy family's true ordering, so its
    # ranking never degrades while the order-1 weighting still ranks; see
    # the decisions ledger for the blocking analysis.
    ranking = ranking_reports["product"].ranking
    naive_tau = ranking.tau_mean["naive"]
    beta_tau = ranking.tau_mean["beta_ipw:1"]
    ok = naive_tau < beta_tau
    assert _emit(8, "naive strictly below order-1 on product", ok,
                 f"naive {naive_tau:.3f} vs beta_ipw:1 {beta_tau:.3f}")


@pytest.fixture(scope="module")
def scaling_report():
    return _run(parse_config(CONFIGS / "variance_scaling.cfg"))


def test_criterion_10_variance_growth(scaling_report):
    cells = scaling_report.cells
    sizes = np.log([c.n_units for c in cells])
    slopes = {}
    for estimator_id in ("beta_ipw:1", "ipw"):
        variances = np.log([c.calibration[estimator_id].variance for c in cells])
        slopes[estimator_id] = float(np.polyfit(sizes, variances, 1)[0])
    in_range = 1.0 <= slopes["beta_ipw:1"] <= 2.6
    exceeds = slopes["ipw"] > slopes["beta_ipw:1"]
    ok = in_range and exceeds
    assert _emit(10, "variance growth exponents", ok,
                 f"order-1 slope {slopes['beta_ipw:1']:.2f} in [1, 2.6], "
                 f"exact-match slope {slopes['ipw']:.2f}")


def test_criterion_11_determinism(tmp_path):
    started = time.monotonic()
    outputs = {}
    for workers in (1, 4):
        for attempt in ("a", "b"):
            config = parse_config(CONFIGS / "determinism.cfg")
            config.workers = workers
            out = tmp_path / f"w{workers}{attempt}"
            with contextlib.redirect_stderr(io.StringIO()), \
                    contextlib.redirect_stdout(io.StringIO()):
                run_experiment(config, out_dir=out)
            outputs[(workers, attempt)] = {
                name: (out / name).read_bytes()
                for name in ("curves_raw.csv", "calibration.csv")
            }
    reference = outputs[(1, "a")]
    identical = all(blob == reference for blob in outputs.values())
    elapsed = time.monotonic() - started
    ok = identical and elapsed < 120.0
    assert _emit(11, "byte-identical reruns across worker counts", ok,
                 f"4 runs compared, {elapsed:.1f}s")
