
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hierconformal.conformal import (CalibrationStrategy, ConformalCalibration,
                                     ConformalRegressor, PredictionInterval, calibrate,
                                     clip_interval, conformity_scores, finite_sample_quantile,
                                     predict_interval, quantile_rank, weighted_scores)
from hierconformal.exceptions import CalibrationError, ConfigError, InputError

from oracles import brute_quantile


class TestScores:
    def test_examples(self):
        np.testing.assert_array_equal(conformity_scores([3.0], [3.0]), [0.0])
        np.testing.assert_array_equal(conformity_scores([1, 5], [2, 2]), [1, 3])

    @given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1))
    def test_symmetric(self, pairs):
        a, b = np.array(pairs).T
        np.testing.assert_array_equal(conformity_scores(a, b), conformity_scores(b, a))

    def test_gamma_zero_is_unweighted(self, rng):
        y, yh, s = rng.normal(size=50), rng.normal(size=50), rng.uniform(0, 5, 50)
        np.testing.assert_array_equal(weighted_scores(y, yh, s, gamma=0.0),
                                      conformity_scores(y, yh))

    def test_weighted_examples(self):
        assert weighted_scores([2.0], [0.0], [2.0], 1.0, 1e-6)[0] == 1.0
        assert weighted_scores([1.0], [0.0], [0.0], 1.0, 1e-6)[0] == pytest.approx(1e6)

    @pytest.mark.parametrize("gamma,eps", [(-0.1, 1e-6), (2.5, 1e-6), (1.0, 0.0)])
    def test_weighting_validated(self, gamma, eps):
        with pytest.raises(ConfigError):
            weighted_scores([1.0], [0.0], [1.0], gamma, eps)


class TestQuantile:
    def test_n19(self):
        s = np.arange(1.0, 20.0)
        assert quantile_rank(19, 0.05) == 19
        assert finite_sample_quantile(s, 0.05) == 19.0

    def test_1_to_99(self):
        assert finite_sample_quantile(np.arange(1.0, 100.0), 0.10) == 90.0

    def test_decimal_alpha(self):
        assert quantile_rank(149, 0.18) == 123

    def test_clamped_to_max(self):
        assert finite_sample_quantile([4.0, 1.0, 3.0, 2.0], 0.05) == 4.0

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=500),
           st.sampled_from([0.01, 0.05, 0.1, 0.2]))
    def test_matches_brute_force(self, scores, alpha):
        assert finite_sample_quantile(scores, alpha) == brute_quantile(scores, alpha)

    def test_errors(self):
        with pytest.raises(InputError):
            finite_sample_quantile([], 0.1)
        with pytest.raises(InputError):
            finite_sample_quantile([1.0], 1.0)
        with pytest.raises(InputError):
            finite_sample_quantile([np.nan], 0.1)


class TestCalibrate:
    def test_one_score_per_hospital(self, rng):
        s = rng.exponential(size=40)
        h = np.array([f"H{i}" for i in range(40)])
        pooled = calibrate(s, h, "cdf_pooling", 0.1)
        single = calibrate(s, h, "single_subsample", 0.1, seed=3)
        assert pooled.q_hat == single.q_hat

    @pytest.mark.parametrize("strategy", ["cdf_pooling", "single_subsample",
                                          "repeated_subsample(10)"])
    def test_constant_scores(self, strategy):
        h = np.repeat(["A", "B", "C"], 5)
        assert calibrate(np.full(15, 2.5), h, strategy, 0.2).q_hat == 2.5

    def test_repeated_within_single_band(self):
        rng = np.random.default_rng(0)
        h = np.repeat([f"H{i}" for i in range(50)], 20)
        s = rng.exponential(size=1000) * np.repeat(rng.uniform(0.5, 2, 50), 20)
        q = calibrate(s, h, CalibrationStrategy("repeated_subsample", 100), 0.1, seed=1).q_hat
        # brute-force distribution of single sub-sample quantiles
        groups = s.reshape(50, 20)
        draws = groups[np.arange(50), rng.integers(0, 20, (10000, 50))]
        qs = np.array([brute_quantile(d.tolist(), 0.1) for d in draws])
        lo, hi = np.percentile(qs, [10, 90])
        assert lo <= q <= hi

    def test_subsample_deterministic(self, rng):
        s = rng.exponential(size=100)
        h = np.repeat([f"H{i}" for i in range(10)], 10)
        a = calibrate(s, h, "repeated_subsample(20)", 0.1, seed=7)
        b = calibrate(s, h, "repeated_subsample(20)", 0.1, seed=7)
        assert a.q_hat == b.q_hat

    def test_missing_hospital(self):
        with pytest.raises(CalibrationError):
            calibrate(np.ones(4), ["A", "A", "B", "B"], "single_subsample", 0.1,
                      hospitals=["A", "B", "C"])

    def test_invalid_scores(self):
        with pytest.raises(CalibrationError):
            calibrate(np.array([-1.0, 1.0]), ["A", "B"])

    def test_strategy_parse(self):
        assert CalibrationStrategy.parse("repeated_subsample(50)").B == 50
        assert str(CalibrationStrategy.parse("single_subsample")) == "single_subsample"
        with pytest.raises(ConfigError):
            CalibrationStrategy.parse("jackknife")

    def test_round_trip(self):
        cal = calibrate(np.arange(10.0), np.repeat(["A", "B"], 5), "repeated_subsample(5)",
                        0.2, gamma=1.0)
        assert ConformalCalibration.from_dict(cal.to_dict()) == cal


class TestIntervals:
    def test_unweighted(self):
        cal = ConformalCalibration(8.16, CalibrationStrategy(), 0.05)
        iv = predict_interval(cal, [5.0])
        assert iv.lower[0] == pytest.approx(-3.16) and iv.upper[0] == pytest.approx(13.16)
        assert iv.width[0] == pytest.approx(16.32)

    def test_weighted_half_width(self):
        cal = ConformalCalibration(2.0, CalibrationStrategy(), 0.05, gamma=1.0)
        assert predict_interval(cal, [0.0], [3.0]).half_width[0] == 6.0

    def test_gamma_zero_matches_unweighted(self, rng):
        y = rng.normal(size=20)
        a = predict_interval(ConformalCalibration(1.5, CalibrationStrategy(), 0.1), y)
        b = predict_interval(ConformalCalibration(1.5, CalibrationStrategy(), 0.1, gamma=0.0),
                             y, rng.uniform(0, 9, 20))
        assert a.lower.tobytes() == b.lower.tobytes() and a.upper.tobytes() == b.upper.tobytes()

    def test_weighted_needs_sigma(self):
        with pytest.raises(InputError):
            predict_interval(ConformalCalibration(1.0, CalibrationStrategy(), 0.1, gamma=1.0),
                             [0.0])

    def test_clip(self):
        iv = PredictionInterval([-3.16], [13.16], [5.0])
        c = clip_interval(iv)
        assert c.lower[0] == 0.0 and c.upper[0] == 13.16
        assert c.raw_width[0] == pytest.approx(16.32)
        assert not c.degenerate[0]

    def test_clip_above_floor_unchanged(self):
        iv = PredictionInterval([1.0], [3.0], [2.0])
        c = clip_interval(iv)
        assert (c.lower[0], c.upper[0]) == (1.0, 3.0)

    def test_clip_degenerate(self):
        c = clip_interval(PredictionInterval([-5.0], [-1.0], [-3.0]))
        assert (c.lower[0], c.upper[0]) == (0.0, 0.0)
        assert c.degenerate[0]

    def test_contains_closed(self):
        assert PredictionInterval([0.0], [1.0], [0.5]).contains([1.0])[0]


def test_regressor_coverage():
    rng = np.random.default_rng(3)
    y_hat = rng.normal(size=2000)
    y = y_hat + rng.normal(size=2000)
    clusters = np.repeat(np.arange(100), 20).astype(str)
    reg = ConformalRegressor(alpha=0.1).fit(y_hat[:1000], y[:1000], clusters[:1000])
    iv = reg.predict_interval(y_hat[1000:])
    assert 0.86 < iv.contains(y[1000:]).mean() < 0.94


class TestCoverageGuarantee:
    N_CAL, N_TEST, ALPHA, SEEDS = 1000, 2000, 0.05, 20

    @classmethod
    def pooled_band(cls, level=0.99):
        # exact law of the covered count summed over seeds: per seed it is
        # beta-binomial(n_test, k, n_cal + 1 - k) for continuous exchangeable scores
        k = math.ceil((cls.N_CAL + 1) * (1 - cls.ALPHA))
        pmf = stats.betabinom(cls.N_TEST, k, cls.N_CAL + 1 - k).pmf(np.arange(cls.N_TEST + 1))
        total = np.array([1.0])
        for _ in range(cls.SEEDS):
            total = np.convolve(total, pmf)
        cdf = np.cumsum(total)
        tail = (1 - level) / 2
        return np.searchsorted(cdf, tail), np.searchsorted(cdf, 1 - tail)

    @pytest.mark.parametrize("gamma", [None, 0.5, 1.0])
    def test_exchangeable_coverage(self, gamma):
        # weighted scores of exchangeable rows stay exchangeable under any
        # sigma map fixed in advance, so every gamma has the same guarantee
        lo, hi = self.pooled_band()
        n_cal = self.N_CAL
        total = 0
        for seed in range(self.SEEDS):
            rng = np.random.default_rng([17, seed])
            x = rng.standard_normal(n_cal + self.N_TEST)
            sigma = 1.0 + np.abs(x)
            y = 2.0 * x + sigma * rng.standard_normal(x.size)
            y_hat = 2.0 * x
            cal_s = (conformity_scores(y[:n_cal], y_hat[:n_cal]) if gamma is None else
                     weighted_scores(y[:n_cal], y_hat[:n_cal], sigma[:n_cal], gamma))
            cal = calibrate(cal_s, np.zeros(n_cal, dtype=int), alpha=self.ALPHA, gamma=gamma)
            iv = predict_interval(cal, y_hat[n_cal:], None if gamma is None else sigma[n_cal:])
            total += int(iv.contains(y[n_cal:]).sum())
        assert lo <= total <= hi
