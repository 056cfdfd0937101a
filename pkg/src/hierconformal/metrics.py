"""Interval and uncertainty evaluation metrics.

All functions take plain vectors (one entry per evaluated row) and are
pure.  Widths are always computed from the unclipped intervals.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats

from .exceptions import InputError, UndefinedMetricError

N_QUANTILES = 5


def _vec(*arrays, min_len=1):
    out = [np.atleast_1d(np.asarray(a, dtype=float)) for a in arrays]
    n = out[0].size
    if any(a.ndim != 1 or a.size != n for a in out):
        raise InputError("inputs must be equal-length vectors")
    if n < min_len:
        raise InputError(f"need at least {min_len} rows, got {n}")
    return out


def covered(y, lower, upper):
    y, lower, upper = _vec(y, lower, upper)
    return (lower <= y) & (y <= upper)


def coverage(y, lower, upper):
    """Fraction of rows with ``lower <= y <= upper``."""
    return float(covered(y, lower, upper).mean())


def rank_groups(key, n_groups=N_QUANTILES):
    """Split row indices into contiguous groups by ascending ``key``.

    Ties are ordered by row index; group sizes differ by at most one.
    """
    (key,) = _vec(key, min_len=n_groups)
    order = np.lexsort((np.arange(key.size), key))
    return np.array_split(order, n_groups)


@dataclass(frozen=True)
class QuintileStats:
    coverage: tuple
    mean_width: tuple
    mean_sigma: tuple
    counts: tuple

    def to_dict(self):
        return asdict(self)


def quintile_stats(y, lower, upper, sigma):
    """Coverage, mean width and mean sigma within quintiles of ``sigma``."""
    y, lower, upper, sigma = _vec(y, lower, upper, sigma, min_len=N_QUANTILES)
    hit = covered(y, lower, upper)
    width = upper - lower
    groups = rank_groups(sigma)
    return QuintileStats(
        coverage=tuple(float(hit[g].mean()) for g in groups),
        mean_width=tuple(float(width[g].mean()) for g in groups),
        mean_sigma=tuple(float(sigma[g].mean()) for g in groups),
        counts=tuple(int(g.size) for g in groups),
    )


def adaptation_ratio(quintile_widths):
    """Mean width of the top quintile over the bottom one (< 1 is anti-adaptive)."""
    w = np.asarray(quintile_widths, dtype=float)
    if w.size < 2:
        raise InputError("need at least two group widths")
    if not w[0] > 0:
        raise UndefinedMetricError("bottom-quintile width is zero")
    return float(w[-1] / w[0])


def correlation(sigma, abs_resid, kind="pearson"):
    sigma, abs_resid = _vec(sigma, abs_resid, min_len=3)
    if np.ptp(sigma) == 0 or np.ptp(abs_resid) == 0:
        raise UndefinedMetricError("correlation is undefined for constant input")
    if kind == "pearson":
        r = np.corrcoef(sigma, abs_resid)[0, 1]
    elif kind == "spearman":
        r = stats.spearmanr(sigma, abs_resid).statistic
    else:
        raise InputError(f"unknown correlation kind {kind!r}")
    return float(np.clip(r, -1.0, 1.0))


def ece(sigma, resid, n_bins=10):
    """Expected calibration error in outcome units.

    Rows are split into ``n_bins`` equal-count bins by ``sigma``; the result
    is the count-weighted mean of ``|mean(sigma) - sd(resid)|`` over bins,
    with ``sd`` the sample standard deviation (ddof=1).
    """
    sigma, resid = _vec(sigma, resid, min_len=max(n_bins, 1))
    if n_bins < 1:
        raise InputError("n_bins must be >= 1")
    total = 0.0
    for g in rank_groups(sigma, n_bins):
        sd = resid[g].std(ddof=1) if g.size > 1 else 0.0
        total += g.size * abs(sigma[g].mean() - sd)
    return float(total / sigma.size)


def calibration_slope(sigma, abs_resid):
    """OLS slope of ``|resid|`` on ``sigma`` (intercept fitted)."""
    sigma, abs_resid = _vec(sigma, abs_resid, min_len=2)
    if np.ptp(sigma) == 0:
        raise UndefinedMetricError("slope is undefined for constant sigma")
    sc = sigma - sigma.mean()
    return float(sc @ (abs_resid - abs_resid.mean()) / (sc @ sc))


_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def crps_gaussian(y, mu, sigma):
    """CRPS of ``N(mu, sigma^2)`` at ``y`` (elementwise)."""
    y, mu, sigma = (np.asarray(a, dtype=float) for a in (y, mu, sigma))
    if np.any(~(sigma > 0)):
        raise InputError("sigma must be positive")
    z = (y - mu) / sigma
    return sigma * (z * (2.0 * special.ndtr(z) - 1.0)
                    + 2.0 * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) - _INV_SQRT_PI)


def winkler_score(y, lower, upper, alpha):
    """Interval score per row: width plus ``2/alpha`` times the miss distance."""
    y, lower, upper = _vec(y, lower, upper)
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    if np.any(lower > upper):
        raise InputError("lower must not exceed upper")
    return ((upper - lower) + (2.0 / alpha) * np.maximum(lower - y, 0.0)
            + (2.0 / alpha) * np.maximum(y - upper, 0.0))


def rmse(y, y_hat):
    y, y_hat = _vec(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return float("nan")


@dataclass(frozen=True)
class UncertaintyQuality:
    """How well a sigma vector tracks realized residuals."""

    mean_sigma: float
    pearson_r: float
    spearman_rho: float
    ece: float
    calib_slope: float

    def to_dict(self):
        return asdict(self)


def uncertainty_quality(sigma, resid, n_bins=10):
    sigma, resid = _vec(sigma, resid)
    a = np.abs(resid)
    return UncertaintyQuality(
        mean_sigma=float(sigma.mean()),
        pearson_r=_safe(correlation, sigma, a, "pearson"),
        spearman_rho=_safe(correlation, sigma, a, "spearman"),
        ece=ece(sigma, resid, n_bins) if sigma.size >= n_bins else float("nan"),
        calib_slope=_safe(calibration_slope, sigma, a),
    )


@dataclass(frozen=True)
class MetricReport:
    """Evaluation of one method on one set of rows."""

    n: int
    alpha: float
    coverage: float
    mean_width: float
    quintile_coverage: tuple
    quintile_width: tuple
    adaptation_ratio: float
    pearson_r: float
    spearman_rho: float
    ece: float
    calib_slope: float
    mean_crps: float
    mean_winkler: float
    rmse: float
    extra: dict = field(default_factory=dict)

    SCALARS = ("n", "alpha", "coverage", "mean_width", "adaptation_ratio", "pearson_r",
               "spearman_rho", "ece", "calib_slope", "mean_crps", "mean_winkler", "rmse")

    @property
    def anti_adaptive(self):
        return self.adaptation_ratio < 1.0

    def to_dict(self):
        d = asdict(self)
        d["quintile_coverage"] = list(self.quintile_coverage)
        d["quintile_width"] = list(self.quintile_width)
        d["anti_adaptive"] = bool(self.anti_adaptive)
        return d

    def to_json(self):
        return json.dumps(_nan_to_none(self.to_dict()), sort_keys=True, indent=2)

    @classmethod
    def csv_header(cls):
        cols = list(cls.SCALARS)
        cols += [f"q{i + 1}_coverage" for i in range(N_QUANTILES)]
        cols += [f"q{i + 1}_width" for i in range(N_QUANTILES)]
        return cols

    def csv_row(self):
        return ([getattr(self, k) for k in self.SCALARS] + list(self.quintile_coverage)
                + list(self.quintile_width))


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def evaluate(y, y_hat, lower, upper, sigma, alpha, crps_sigma=None, n_bins=10):
    """Full metric report for one method.

    ``sigma`` (the calibrated uncertainty) forms the quintiles and is
    scored for correlation, ECE and slope; ``crps_sigma`` (default
    ``sigma``) is the SD of the Gaussian used for CRPS.
    """
    y, y_hat, lower, upper, sigma = _vec(y, y_hat, lower, upper, sigma,
                                         min_len=N_QUANTILES)
    crps_sigma = sigma if crps_sigma is None else _vec(crps_sigma, y)[0]
    resid = y - y_hat
    q = quintile_stats(y, lower, upper, sigma)
    uq = uncertainty_quality(sigma, resid, n_bins)
    return MetricReport(
        n=int(y.size), alpha=float(alpha), coverage=coverage(y, lower, upper),
        mean_width=float(np.mean(upper - lower)), quintile_coverage=q.coverage,
        quintile_width=q.mean_width,
        adaptation_ratio=_safe(adaptation_ratio, q.mean_width),
        pearson_r=uq.pearson_r, spearman_rho=uq.spearman_rho, ece=uq.ece,
        calib_slope=uq.calib_slope,
        mean_crps=float(np.mean(crps_gaussian(y, y_hat, crps_sigma))),
        mean_winkler=float(np.mean(winkler_score(y, lower, upper, alpha))),
        rmse=rmse(y, y_hat),
    )
