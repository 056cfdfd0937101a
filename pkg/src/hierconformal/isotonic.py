"""Isotonic recalibration of predictive standard deviations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InputError

# E|Z| = sqrt(2/pi) for Z ~ N(0, 1), so |residual| * sqrt(pi/2) estimates an SD
HALF_NORMAL_TO_SD = float(np.sqrt(np.pi / 2.0))


def pava(x, y):
    """Nondecreasing least-squares fit of ``y`` on ``x`` (pool adjacent violators).

    Returns ``(breakpoints, values)``: the sorted distinct ``x`` and the
    fitted value at each.  Rows with equal ``x`` are pooled first.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    breaks, first = np.unique(xs, return_index=True)
    bounds = np.append(first, xs.size)
    # blocks as [start, end) into ys, with running sums for the violation test
    starts, ends, sums, counts = [], [], [], []
    for g in range(breaks.size):
        s, e = bounds[g], bounds[g + 1]
        starts.append(s)
        ends.append(e)
        sums.append(ys[s:e].sum())
        counts.append(e - s)
        while len(sums) > 1 and sums[-2] / counts[-2] > sums[-1] / counts[-1]:
            s_last, c_last, e_last = sums.pop(), counts.pop(), ends.pop()
            starts.pop()
            sums[-1] += s_last
            counts[-1] += c_last
            ends[-1] = e_last
    fitted = np.empty(xs.size)
    for s, e in zip(starts, ends):
        # correctly rounded block mean: independent of merge order
        fitted[s:e] = math.fsum(ys[s:e]) / (e - s)
    fitted = np.maximum.accumulate(fitted)
    return breaks, fitted[first]


@dataclass(frozen=True, eq=False)
class IsotonicMap:
    """Right-continuous nondecreasing step function, flat beyond the ends."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if b.ndim != 1 or b.shape != v.shape or b.size == 0:
            raise InputError("breakpoints and values must be equal-length non-empty vectors")
        if np.any(np.diff(b) <= 0):
            raise InputError("breakpoints must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise InputError("values must be nondecreasing")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    def __call__(self, raw):
        raw = np.asarray(raw, dtype=float)
        pos = np.searchsorted(self.breakpoints, raw, side="right") - 1
        return self.values[np.clip(pos, 0, None)]

    def to_dict(self):
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}


def fit_isotonic(raw_sigmas, abs_residuals) -> IsotonicMap:
    """Map raw predictive SDs to the SD scale implied by observed residuals."""
    raw = np.asarray(raw_sigmas, dtype=float)
    res = np.abs(np.asarray(abs_residuals, dtype=float))
    if raw.ndim != 1 or raw.shape != res.shape:
        raise InputError("raw_sigmas and abs_residuals must be equal-length vectors")
    if raw.size < 10:
        raise InputError("isotonic calibration needs at least 10 pairs")
    if np.any(raw <= 0) or not np.isfinite(raw).all() or not np.isfinite(res).all():
        raise InputError("raw sigmas must be positive and finite")
    return IsotonicMap(*pava(raw, res * HALF_NORMAL_TO_SD))


def apply_isotonic(iso: IsotonicMap, raw_sigma):
    raw = np.asarray(raw_sigma, dtype=float)
    if np.any(raw < 0):
        raise InputError("raw sigma must be nonnegative")
    return iso(raw)


class IsotonicCalibrator(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(raw_sigma, abs_residual)``, ``transform(raw_sigma)``."""

    def fit(self, X, y):
        self.map_ = fit_isotonic(np.ravel(X), y)
        return self

    def transform(self, X):
        check_is_fitted(self, "map_")
        return apply_isotonic(self.map_, np.ravel(X))
