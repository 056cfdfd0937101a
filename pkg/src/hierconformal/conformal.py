"""Split-conformal calibration with cluster-aware strategies.

Scores are either absolute residuals (unweighted) or absolute residuals
divided by ``max(sigma**gamma, eps)`` (weighted), where ``sigma`` is a
per-row uncertainty estimate.  With ``gamma=0`` the weighted path reduces
exactly to the unweighted one.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import CalibrationError, ConfigError, InputError

STRATEGIES = ("cdf_pooling", "single_subsample", "repeated_subsample")
DEFAULT_EPSILON = 1e-6


def conformity_scores(y, y_hat):
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1 or y.size == 0:
        raise InputError("y and y_hat must be equal-length non-empty vectors")
    return np.abs(y - y_hat)


def _check_weighting(gamma, epsilon):
    if not 0.0 <= gamma <= 2.0:
        raise ConfigError(f"gamma must lie in [0, 2], got {gamma}")
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")


def scale_factor(sigma, gamma, epsilon=DEFAULT_EPSILON):
    """Per-row scale ``max(sigma**gamma, eps)``."""
    _check_weighting(gamma, epsilon)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0) or not np.isfinite(sigma).all():
        raise InputError("sigma must be finite and nonnegative")
    return np.maximum(sigma ** gamma, epsilon)


def weighted_scores(y, y_hat, sigma, gamma=1.0, epsilon=DEFAULT_EPSILON):
    scores = conformity_scores(y, y_hat)
    scale = scale_factor(sigma, gamma, epsilon)
    if scale.shape != scores.shape:
        raise InputError("sigma must have one entry per row")
    return scores / scale


def quantile_rank(n, alpha):
    """1-based order-statistic index ``ceil((1 - alpha)(n + 1))``, clamped to n.

    ``alpha`` is taken at its shortest decimal representation, so that e.g.
    ``alpha=0.18, n=149`` gives 123; binary floating point would give 124.
    """
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    if n < 1:
        raise InputError("at least one score is required")
    a = Fraction(repr(float(alpha)))
    return min(n, math.ceil((1 - a) * (n + 1)))


def finite_sample_quantile(scores, alpha):
    """Conformal quantile: the ``ceil((1 - alpha)(n + 1))``-th smallest score.

    When that rank exceeds ``n`` the largest score is returned.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.size == 0:
        raise InputError("scores must be non-empty")
    if np.isnan(scores).any():
        raise InputError("scores contain NaN")
    k = quantile_rank(scores.size, alpha)
    return float(np.partition(scores, k - 1)[k - 1])


@dataclass(frozen=True)
class CalibrationStrategy:
    """How calibration scores are pooled across hospitals.

    ``kind`` is one of ``cdf_pooling``, ``single_subsample`` (one random
    score per hospital) or ``repeated_subsample`` (median over ``B``
    single sub-samples).
    """

    kind: str = "cdf_pooling"
    B: int = 100

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kind == "repeated_subsample" and self.B < 2:
            raise ConfigError("repeated_subsample needs B >= 2")

    @classmethod
    def parse(cls, text):
        """Parse ``"cdf_pooling"``, ``"single_subsample"`` or ``"repeated_subsample(B)"``."""
        if isinstance(text, CalibrationStrategy):
            return text
        if isinstance(text, dict):
            return cls(**text)
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*(\d+)\s*\))?\s*", str(text))
        if not m:
            raise ConfigError(f"cannot parse strategy {text!r}")
        kind, b = m.group(1), m.group(2)
        if b is not None and kind != "repeated_subsample":
            raise ConfigError(f"strategy {kind!r} takes no argument")
        return cls(kind, int(b)) if b is not None else cls(kind)

    def __str__(self):
        return f"repeated_subsample({self.B})" if self.kind == "repeated_subsample" else self.kind


@dataclass(frozen=True)
class ConformalCalibration:
    """A calibrated conformal quantile and how it was obtained.

    ``gamma is None`` means unweighted mode (``q_hat`` in outcome units);
    otherwise ``q_hat`` is dimensionless and scaled per row by
    ``max(sigma**gamma, epsilon)``.
    """

    q_hat: float
    strategy: CalibrationStrategy
    alpha: float
    gamma: float | None = None
    epsilon: float = DEFAULT_EPSILON
    n_scores: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.q_hat >= 0:
            raise CalibrationError(f"q_hat must be nonnegative, got {self.q_hat}")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.gamma is not None:
            _check_weighting(self.gamma, self.epsilon)

    @property
    def mode(self):
        return "unweighted" if self.gamma is None else "weighted"

    def to_dict(self):
        return {"q_hat": self.q_hat, "strategy": str(self.strategy), "alpha": self.alpha,
                "mode": self.mode, "gamma": self.gamma, "epsilon": self.epsilon,
                "n_scores": self.n_scores, "provenance": dict(self.provenance)}

    @classmethod
    def from_dict(cls, d):
        return cls(q_hat=d["q_hat"], strategy=CalibrationStrategy.parse(d["strategy"]),
                   alpha=d["alpha"], gamma=d["gamma"], epsilon=d["epsilon"],
                   n_scores=d.get("n_scores", 0), provenance=d.get("provenance", {}))


def _group(clusters, expected):
    clusters = np.asarray(clusters).astype(str)
    keys, inv = np.unique(clusters, return_inverse=True)
    if expected is not None:
        missing = sorted(set(np.asarray(expected).astype(str).tolist()) - set(keys.tolist()))
        if missing:
            raise CalibrationError(f"hospitals without calibration scores: {missing[:5]}")
    order = np.argsort(inv, kind="stable")
    counts = np.bincount(inv)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return order, starts, counts


def subsample_once(scores, order, starts, counts, rng):
    """One uniformly drawn score per cluster."""
    pick = starts + np.floor(rng.random(counts.size) * counts).astype(np.int64)
    return scores[order[pick]]


def calibrate(scores, clusters, strategy="cdf_pooling", alpha=0.05, seed=0, gamma=None,
              epsilon=DEFAULT_EPSILON, hospitals=None, provenance=None):
    """Calibrate the conformal quantile.

    Parameters
    ----------
    scores : array of shape (n,)
        Conformity scores (weighted or not; ``gamma`` records which).
    clusters : array-like of shape (n,)
        Hospital id of each score.
    strategy : CalibrationStrategy or str
    alpha : float
        Target miscoverage.
    seed : int
        Seed for the sub-sampling strategies.
    gamma, epsilon : weighting used to produce ``scores`` (None = unweighted).
    hospitals : array-like, optional
        Hospitals that must each contribute at least one score.
    provenance : dict, optional
        Audit information stored on the result.
    """
    strategy = CalibrationStrategy.parse(strategy)
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size == 0:
        raise CalibrationError("calibration needs a non-empty score vector")
    if np.any(scores < 0) or not np.isfinite(scores).all():
        raise CalibrationError("scores must be finite and nonnegative")
    if np.shape(clusters) != scores.shape:
        raise CalibrationError("clusters must have one entry per score")
    if strategy.kind == "cdf_pooling":
        if hospitals is not None:
            _group(clusters, hospitals)
        q = finite_sample_quantile(scores, alpha)
    else:
        order, starts, counts = _group(clusters, hospitals)
        if strategy.kind == "single_subsample":
            rng = np.random.default_rng(np.random.SeedSequence(seed))
            q = finite_sample_quantile(subsample_once(scores, order, starts, counts, rng), alpha)
        else:
            seqs = np.random.SeedSequence(seed).spawn(strategy.B)
            qs = [finite_sample_quantile(
                subsample_once(scores, order, starts, counts, np.random.default_rng(ss)), alpha)
                for ss in seqs]
            q = float(np.median(qs))
    prov = {"seed": int(seed)}
    prov.update(provenance or {})
    return ConformalCalibration(q, strategy, float(alpha), gamma, float(epsilon),
                                int(scores.size), prov)


@dataclass(frozen=True, eq=False)
class PredictionInterval:
    """Vector of intervals.

    ``raw_width`` is the width before any clipping; ``degenerate`` marks
    rows collapsed to a point by clipping.
    """

    lower: np.ndarray
    upper: np.ndarray
    center: np.ndarray
    raw_width: np.ndarray = None
    degenerate: np.ndarray = None

    def __post_init__(self):
        lo, up, c = (np.atleast_1d(np.asarray(v, dtype=float))
                     for v in (self.lower, self.upper, self.center))
        if not (lo.shape == up.shape == c.shape):
            raise InputError("lower, upper and center must have equal shapes")
        if np.any(lo > c) or np.any(c > up):
            raise InputError("intervals must satisfy lower <= center <= upper")
        raw = up - lo if self.raw_width is None else np.asarray(self.raw_width, dtype=float)
        deg = np.zeros(lo.shape, bool) if self.degenerate is None else np.asarray(
            self.degenerate, dtype=bool)
        for name, v in (("lower", lo), ("upper", up), ("center", c), ("raw_width", raw),
                        ("degenerate", deg)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def half_width(self):
        return (self.upper - self.lower) / 2.0

    @property
    def width(self):
        return self.upper - self.lower

    def __len__(self):
        return self.lower.size

    def contains(self, y):
        y = np.asarray(y, dtype=float)
        return (self.lower <= y) & (y <= self.upper)


def predict_interval(calibration: ConformalCalibration, y_hat, sigma=None):
    """Intervals ``y_hat +/- q_hat`` (unweighted) or ``y_hat +/- q_hat * scale``."""
    y_hat = np.atleast_1d(np.asarray(y_hat, dtype=float))
    if calibration.gamma is None:
        half = np.full(y_hat.shape, calibration.q_hat)
    else:
        if sigma is None:
            raise InputError("weighted calibration requires sigma at prediction time")
        scale = scale_factor(np.atleast_1d(sigma), calibration.gamma, calibration.epsilon)
        if scale.shape != y_hat.shape:
            raise InputError("sigma must have one entry per prediction")
        half = calibration.q_hat * scale
    return PredictionInterval(y_hat - half, y_hat + half, y_hat)


def clip_interval(interval: PredictionInterval, floor=0.0):
    """Raise lower bounds to ``floor`` for display; ``raw_width`` is kept.

    Rows whose upper bound is below ``floor`` collapse to ``[floor, floor]``
    and are flagged in ``degenerate``.
    """
    if not np.isfinite(floor):
        raise InputError("floor must be finite")
    lower = np.maximum(interval.lower, floor)
    upper = np.maximum(interval.upper, floor)
    degenerate = interval.degenerate | (interval.upper < floor)
    center = np.clip(interval.center, lower, upper)
    return PredictionInterval(lower, upper, center, interval.raw_width, degenerate)


class ConformalRegressor(BaseEstimator):
    """Split-conformal wrapper around precomputed predictions.

    ``fit(y_hat, y, clusters, sigma=None)`` calibrates on held-out rows;
    ``predict_interval(y_hat, sigma=None)`` returns intervals.  ``gamma=None``
    selects unweighted scores.
    """

    def __init__(self, alpha=0.05, strategy="cdf_pooling", gamma=None,
                 epsilon=DEFAULT_EPSILON, seed=0):
        self.alpha = alpha
        self.strategy = strategy
        self.gamma = gamma
        self.epsilon = epsilon
        self.seed = seed

    def fit(self, y_hat, y, clusters, sigma=None):
        if self.gamma is None:
            scores = conformity_scores(y, y_hat)
        else:
            if sigma is None:
                raise InputError("weighted calibration requires sigma")
            scores = weighted_scores(y, y_hat, sigma, self.gamma, self.epsilon)
        self.calibration_ = calibrate(scores, clusters, self.strategy, self.alpha, self.seed,
                                      self.gamma, self.epsilon)
        return self

    def predict_interval(self, y_hat, sigma=None):
        if not hasattr(self, "calibration_"):
            raise CalibrationError("regressor is not calibrated")
        return predict_interval(self.calibration_, y_hat, sigma)
