"""MCMC convergence diagnostics: rank-normalized split R-hat and ESS.

Draw arrays have shape (n_chains, n_draws).
"""

import numpy as np
from scipy import special, stats

from .exceptions import InputError


def _as_chains(draws, min_chains=1, min_draws=4):
    ary = np.asarray(draws, dtype=float)
    if ary.ndim == 1:
        ary = ary[None, :]
    if ary.ndim != 2:
        raise InputError(f"draws must have shape (chains, draws), got {ary.shape}")
    if ary.shape[0] < min_chains or ary.shape[1] < min_draws:
        raise InputError(
            f"need at least {min_chains} chains of {min_draws} draws, got {ary.shape}"
        )
    if not np.isfinite(ary).all():
        raise InputError("draws contain non-finite values")
    return ary


def split_chains(ary):
    """Halve every chain (dropping the middle draw when odd)."""
    half = ary.shape[1] // 2
    return np.vstack((ary[:, :half], ary[:, -half:]))


def rank_normalize(ary):
    """Normal scores of pooled ranks (average ranks for ties)."""
    ranks = stats.rankdata(ary, method="average").reshape(ary.shape)
    return special.ndtri((ranks - 0.375) / (ary.size + 0.25))


def is_degenerate(draws):
    return bool(np.ptp(np.asarray(draws, dtype=float)) == 0)


def _rhat_basic(ary):
    n = ary.shape[1]
    chain_mean = ary.mean(axis=1)
    within = ary.var(axis=1, ddof=1).mean()
    between = n * chain_mean.var(ddof=1)
    if within == 0:
        return 1.0
    return float(np.sqrt(((n - 1) / n * within + between / n) / within))


def r_hat(draws):
    """Rank-normalized split R-hat: the larger of the bulk and folded values.

    Zero-variance draws return 1.0 (see :func:`is_degenerate`).
    """
    ary = _as_chains(draws, min_chains=2, min_draws=4)
    if is_degenerate(ary):
        return 1.0
    bulk = _rhat_basic(rank_normalize(split_chains(ary)))
    folded = np.abs(ary - np.median(ary))
    tail = 1.0 if is_degenerate(folded) else _rhat_basic(rank_normalize(split_chains(folded)))
    return max(bulk, tail)


def _autocov(x):
    n = x.size
    m = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean()
    f = np.fft.rfft(xc, m)
    return np.fft.irfft(f * np.conjugate(f), m)[:n] / n


def _ess_geyer(ary):
    n_chain, n_draw = ary.shape
    acov = np.stack([_autocov(c) for c in ary])
    chain_mean = ary.mean(axis=1)
    mean_var = acov[:, 0].mean() * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += chain_mean.var(ddof=1)
    if var_plus <= 0:
        return float(n_chain * n_draw)
    rho = np.zeros(n_draw)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    # initial positive sequence
    t = 1
    while t < n_draw - 2 and rho_even + rho_odd >= 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * rho[:max_t].sum() + rho[max_t + 1:max_t + 2].sum()
    tau = max(tau, 1.0 / np.log10(n_chain * n_draw))
    return float(n_chain * n_draw / tau)


def ess(draws, method="bulk"):
    """Effective sample size with Geyer's initial monotone sequence.

    ``method="bulk"`` works on split, rank-normalized chains; ``"basic"``
    on the raw (split) draws.  Zero-variance draws return the draw count.
    """
    ary = _as_chains(draws, min_chains=1, min_draws=4)
    if is_degenerate(ary):
        return float(ary.size)
    ary = split_chains(ary)
    if method == "bulk":
        ary = rank_normalize(ary)
    elif method != "basic":
        raise InputError(f"unknown ESS method {method!r}")
    return _ess_geyer(ary)


def mcse_mean(draws):
    ary = _as_chains(draws)
    return float(ary.std(ddof=1) / np.sqrt(ess(ary, method="basic")))


def mcse_sd(draws):
    """Delta-method Monte-Carlo SE of the posterior SD."""
    ary = _as_chains(draws)
    sd = ary.std(ddof=1)
    sq = (ary - ary.mean()) ** 2
    return float(sq.std(ddof=1) / np.sqrt(ess(sq, method="basic")) / (2.0 * sd))
