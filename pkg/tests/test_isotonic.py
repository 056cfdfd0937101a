
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierconformal.exceptions import InputError
from hierconformal.isotonic import (HALF_NORMAL_TO_SD, IsotonicCalibrator, IsotonicMap,
                                    apply_isotonic, fit_isotonic, pava)

from oracles import reference_pava


def test_monotone_input_is_identity():
    b, v = pava([1, 2, 3, 4], [0.5, 1.0, 1.0, 2.0])
    np.testing.assert_array_equal(v, [0.5, 1.0, 1.0, 2.0])


def test_single_violation():
    _, v = pava([1, 2, 3], [1, 3, 2])
    np.testing.assert_allclose(v, [1, 2.5, 2.5])


def test_ties_pooled_first():
    b, v = pava([1, 1, 2], [4, 0, 3])
    np.testing.assert_array_equal(b, [1, 2])
    np.testing.assert_allclose(v, [2, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.floats(0, 50, allow_nan=False)),
                min_size=1, max_size=60))
def test_matches_reference(pairs):
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    b, v = pava(x, y)
    rb, rv = reference_pava(x, y)
    np.testing.assert_array_equal(b, rb)
    np.testing.assert_array_equal(v, rv)
    assert np.all(np.diff(v) >= 0)


def test_reference_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(10, 80))
        raw = rng.uniform(0.1, 5, n).round(1)
        res = np.abs(rng.normal(0, raw))
        iso = fit_isotonic(raw, res)
        rb, rv = reference_pava(raw, res * HALF_NORMAL_TO_SD)
        np.testing.assert_array_equal(iso.breakpoints, rb)
        np.testing.assert_array_equal(iso.values, rv)
        assert np.all(np.diff(iso.values) >= 0)


def test_edge_extension_and_breakpoints():
    iso = IsotonicMap(np.array([1.0, 2.0, 3.0]), np.array([10.0, 20.0, 30.0]))
    assert apply_isotonic(iso, [0.5])[0] == 10.0
    assert apply_isotonic(iso, [2.0])[0] == 20.0
    assert apply_isotonic(iso, [2.5])[0] == 20.0
    assert apply_isotonic(iso, [99.0])[0] == 30.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=30, unique=True),
       st.lists(st.floats(0, 10), min_size=30, max_size=30),
       st.floats(0, 12), st.floats(0, 12))
def test_output_monotone(bps, vals, a, b):
    bps = np.sort(bps)
    vals = np.sort(np.array(vals[:bps.size]))
    iso = IsotonicMap(bps, vals)
    lo, hi = min(a, b), max(a, b)
    assert iso(lo) <= iso(hi)


def test_calibrated_slope_near_half_normal_mean(rng):
    true_sd = rng.uniform(1, 5, 20000)
    raw = 0.1 * true_sd ** 1.5  # monotone but badly scaled
    resid = rng.normal(0, true_sd)
    iso = fit_isotonic(raw[:10000], np.abs(resid[:10000]))
    cal = apply_isotonic(iso, raw[10000:])
    a = np.abs(resid[10000:])
    sc = cal - cal.mean()
    slope = sc @ (a - a.mean()) / (sc @ sc)
    assert 0.7 <= slope <= 0.9


def test_input_validation():
    with pytest.raises(InputError):
        fit_isotonic(np.ones(5), np.ones(5))
    with pytest.raises(InputError):
        fit_isotonic(np.r_[0.0, np.ones(11)], np.ones(12))
    with pytest.raises(InputError):
        IsotonicMap(np.array([1.0, 1.0]), np.array([1.0, 2.0]))
    with pytest.raises(InputError):
        IsotonicMap(np.array([1.0, 2.0]), np.array([2.0, 1.0]))
    iso = IsotonicMap(np.array([1.0]), np.array([1.0]))
    with pytest.raises(InputError):
        apply_isotonic(iso, [-1.0])


def test_transformer_wrapper(rng):
    raw = rng.uniform(1, 2, 50)
    cal = IsotonicCalibrator().fit(raw, np.abs(rng.normal(size=50)))
    assert np.all(np.diff(cal.transform(np.sort(raw))) >= 0)
