"""Calibration and ranking aggregation."""

import numpy as np
import pytest

from cluster_qini.metrics import calibration, kendall_tau, rank_policies


def curves(*rows):
    return np.asarray(rows, dtype=float)


class TestCalibration:
    truth = np.array([0.0, 0.1, 0.2, 0.3])

    def test_perfect_estimates(self):
        report = calibration(curves(self.truth, self.truth), self.truth)
        assert (report.bias, report.variance, report.mse) == (0.0, 0.0, 0.0)

    def test_constant_shift(self):
        est = curves(*([np.r_[0.0, self.truth[1:] + 0.05]] * 3))
        report = calibration(est, self.truth)
        assert report.bias == pytest.approx(0.05)
        assert report.variance == pytest.approx(0.0)
        assert report.mse == pytest.approx(0.05**2)

    def test_symmetric_pair_population_variance(self):
        c = 0.2
        up = np.r_[0.0, self.truth[1:] + c]
        down = np.r_[0.0, self.truth[1:] - c]
        report = calibration(curves(up, down), self.truth)
        assert report.bias == pytest.approx(0.0, abs=1e-15)
        assert report.variance == pytest.approx(c**2)
        assert report.mse == pytest.approx(c**2)

    def test_origin_point_excluded(self):
        # a wrong origin would dilute every metric if it were included
        est = curves(self.truth, self.truth)
        report = calibration(est, self.truth)
        assert report.mse == 0.0

    def test_decomposition_identity_fixed_truth(self):
        rng = np.random.default_rng(5)
        est = np.zeros((20, 5))
        est[:, 1:] = rng.normal(size=(20, 4))
        truth = np.r_[0.0, rng.normal(size=4)]
        report = calibration(est, truth)
        per_point_bias_sq = ((est[:, 1:] - truth[1:]).mean(axis=0)) ** 2
        per_point_var = est[:, 1:].var(axis=0, ddof=0)
        assert report.mse == pytest.approx(float((per_point_bias_sq + per_point_var).mean()), abs=1e-12)
        assert report.mse >= report.bias**2 - 1e-12

    def test_per_repetition_truth_accepted(self):
        rng = np.random.default_rng(6)
        truth = np.zeros((8, 4))
        truth[:, 1:] = rng.normal(size=(8, 3))
        est = truth + 0.01
        est[:, 0] = 0.0
        report = calibration(est, truth)
        assert report.bias == pytest.approx(0.01)
        assert report.mse == pytest.approx(0.01**2)

    def test_repetition_order_invariance(self):
        rng = np.random.default_rng(7)
        est = np.zeros((10, 4))
        est[:, 1:] = rng.normal(size=(10, 3))
        truth = np.r_[0.0, rng.normal(size=3)]
        a = calibration(est, truth)
        b = calibration(est[::-1], truth)
        assert (a.bias, a.variance, a.mse) == (b.bias, b.variance, b.mse)

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            calibration(np.zeros((3, 4)), np.zeros(5))

    def test_stderr_shrinks_with_repetitions(self):
        rng = np.random.default_rng(8)
        big = np.zeros((400, 4))
        big[:, 1:] = rng.normal(size=(400, 3))
        small = big[:40]
        truth = np.zeros(4)
        assert calibration(big, truth).se_bias < calibration(small, truth).se_bias


class TestKendall:
    def test_identical(self):
        values = np.arange(7, dtype=float)
        assert kendall_tau(values, values) == 1.0

    def test_reversed(self):
        values = np.arange(7, dtype=float)
        assert kendall_tau(values, values[::-1]) == -1.0

    def test_single_swap(self):
        assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1.0 / 3.0)

    def test_too_few_items(self):
        with pytest.raises(ValueError):
            kendall_tau([1.0], [1.0])

    def test_constant_input_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            kendall_tau([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_bounds_and_symmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a, b = rng.normal(size=(2, 6))
            tau = kendall_tau(a, b)
            assert -1.0 <= tau <= 1.0
            assert tau == pytest.approx(kendall_tau(b, a))

    def test_permutation_identities(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            a = rng.permutation(8).astype(float)
            assert kendall_tau(a, a) == 1.0
            assert kendall_tau(a, -a) == -1.0


class TestRankPolicies:
    def test_oracle_ranks_itself_perfectly(self):
        truth = {f"eps={i}": 1.0 - 0.1 * i for i in range(5)}
        report = rank_policies(truth, {"oracle": dict(truth)})
        assert report.tau["oracle"] == 1.0

    def test_reversed_estimator(self):
        truth = {i: float(i) for i in range(4)}
        backwards = {i: -float(i) for i in range(4)}
        report = rank_policies(truth, {"bad": backwards})
        assert report.tau["bad"] == -1.0

    def test_missing_policy_rejected(self):
        truth = {0: 1.0, 1: 0.5}
        with pytest.raises(ValueError, match="missing"):
            rank_policies(truth, {"est": {0: 1.0}})

    def test_needs_two_policies(self):
        with pytest.raises(ValueError):
            rank_policies({0: 1.0}, {})
