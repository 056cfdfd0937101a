"""Bayesian hierarchical calibration of forest predictions.

Model::

    y_i ~ N(mu_i, sigma^2)
    mu_i = beta0 + beta1 * f_i + alpha[h_i] + gamma[r_i]
    alpha_h ~ N(0, sigma_h^2),  gamma_r ~ N(0, sigma_r^2)
    beta0 ~ N(0, s0^2),  beta1 ~ N(0, s1^2)
    sigma, sigma_h, sigma_r ~ HalfNormal(scale)

Posterior draws come from a two-block Gibbs sampler.  Block one draws all
location parameters (beta0, beta1, gamma, alpha) jointly from their
Gaussian full conditional.  Block two draws each variance from its full
conditional, a generalized inverse Gaussian: with a half-normal prior of
scale ``s`` on the SD and ``m`` centred values with sum of squares ``SS``,
the variance has density proportional to
``v^((1-m)/2 - 1) exp(-(SS/v + v/s^2)/2)``.

With only a few hundred draws per chain, split R-hat is noisy even for
independent draws.  Both blocks therefore use antithetic moves that leave
their conditional invariant.  Location coordinates are whitened with the
symmetric square root of the conditional correlation matrix, mapped to
uniforms and rotated by a random shift modulo 1.  The observation
variance uses ordered overrelaxation with a half-turn rank shift among
``n_order + 1`` candidates.

The two cluster variances are by default drawn with every location
parameter integrated out (``collapse``), which removes the slow coupling
between a cluster variance, its effects and the intercept.  That move is
a Metropolis-Hastings step on the log variance whose proposal rotates the
current quantile under a fine grid approximation of the collapsed
conditional; the acceptance step makes it exact.  Without ``collapse``
the cluster variances take the generalized inverse Gaussian step above,
optionally followed by a non-centred redraw of their scales
(``interweave``).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, special, stats
from sklearn.base import BaseEstimator

from .diagnostics import ess, is_degenerate, r_hat
from .exceptions import ConfigError, FitError, InputError

RHAT_MAX = 1.01
ESS_MIN = 100.0
_U_EPS = 1e-15
_VAR_FLOOR = 1e-300


@dataclass(frozen=True)
class BayesModelSpec:
    """Priors and sampler settings.

    ``beta0_scale`` and ``beta1_scale`` are normal prior SDs; the three
    ``sigma*_scale`` values are half-normal scales on the SDs (days).
    ``draws`` is the retained count per chain.  When the diagnostics gate
    fails, chains are continued, doubling the retained count up to
    ``max_draws`` (``None`` disables extension).  ``collapse`` draws the
    two cluster variances with the locations integrated out, on a grid of
    ``n_grid`` points.  ``interweave`` only applies when ``collapse`` is
    off; it adds a non-centred redraw of the two cluster scales after each
    sweep, which keeps chains moving when a cluster variance is near zero.
    """

    beta0_scale: float = 10.0
    beta1_scale: float = 10.0
    sigma_scale: float = 5.0
    sigma_h_scale: float = 5.0
    sigma_r_scale: float = 5.0
    chains: int = 2
    warmup: int = 500
    draws: int = 250
    seed: int = 0
    max_draws: int | None = 2000
    overrelax: bool = True
    interweave: bool = True
    n_order: int = 15
    collapse: bool = True
    n_grid: int = 1024

    def __post_init__(self):
        for name in ("beta0_scale", "beta1_scale", "sigma_scale", "sigma_h_scale",
                     "sigma_r_scale"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if self.chains < 2:
            raise ConfigError("at least 2 chains are required")
        if self.draws < 100:
            raise ConfigError("at least 100 retained draws are required")
        if self.max_draws is not None and self.max_draws < self.draws:
            raise ConfigError("max_draws must be >= draws (or None for no extension)")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.n_order < 1 or self.n_order % 2 == 0:
            raise ConfigError("n_order must be a positive odd integer")
        if self.n_grid < 16:
            raise ConfigError("n_grid must be at least 16")

    @property
    def resolved_max_draws(self):
        return self.draws if self.max_draws is None else self.max_draws

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown bayes keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Retained draws, stacked chain by chain.

    Scalars have shape (S,), ``alpha`` (S, H) and ``gamma`` (S, R) with
    columns ordered as ``hospitals`` / ``regions``.
    """

    beta0: np.ndarray
    beta1: np.ndarray
    sigma2: np.ndarray
    sigma_h2: np.ndarray
    sigma_r2: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    chain: np.ndarray
    hospitals: np.ndarray
    regions: np.ndarray
    hospital_region: np.ndarray = field(default=None)

    SCALARS = ("beta0", "beta1", "sigma2", "sigma_h2", "sigma_r2")

    def __post_init__(self):
        s = self.beta0.shape[0]
        if s == 0:
            raise InputError("posterior samples are empty")
        for name in self.SCALARS + ("chain",):
            if getattr(self, name).shape != (s,):
                raise InputError(f"{name} must have shape ({s},)")
        if self.alpha.shape != (s, self.hospitals.size):
            raise InputError("alpha must have shape (draws, hospitals)")
        if self.gamma.shape != (s, self.regions.size):
            raise InputError("gamma must have shape (draws, regions)")
        for name in ("sigma2", "sigma_h2", "sigma_r2"):
            if np.any(getattr(self, name) <= 0):
                raise InputError(f"{name} must be positive in every draw")
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if isinstance(v, np.ndarray):
                v.setflags(write=False)

    @property
    def n_draws(self):
        return self.beta0.shape[0]

    @property
    def n_chains(self):
        return np.unique(self.chain).size

    def by_chain(self, values):
        """Reshape per-draw values (S, ...) to (chains, draws, ...)."""
        values = np.asarray(values)
        return values.reshape((self.n_chains, -1) + values.shape[1:])

    def parameters(self):
        """Name -> per-draw vector for every scalar and effect."""
        out = {name: getattr(self, name) for name in self.SCALARS}
        for j, h in enumerate(self.hospitals):
            out[f"alpha[{h}]"] = self.alpha[:, j]
        for j, r in enumerate(self.regions):
            out[f"gamma[{r}]"] = self.gamma[:, j]
        return out

    def to_csv(self, path):
        params = self.parameters()
        per_chain = self.n_draws // self.n_chains
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "draw"] + list(params))
            for i in range(self.n_draws):
                w.writerow([int(self.chain[i]), i % per_chain]
                           + [repr(float(v[i])) for v in params.values()])


@dataclass(frozen=True)
class ConvergenceReport:
    rhat: dict
    ess: dict
    degenerate: tuple = ()
    weakly_identified: tuple = ()
    draws_per_chain: int = 0
    rhat_max: float = RHAT_MAX
    ess_min: float = ESS_MIN

    @property
    def passed(self):
        return (all(v < self.rhat_max for v in self.rhat.values())
                and all(v > self.ess_min for v in self.ess.values()))

    @property
    def worst_rhat(self):
        return max(self.rhat.values())

    @property
    def min_ess(self):
        return min(self.ess.values())

    def failures(self):
        return sorted(k for k in self.rhat
                      if not (self.rhat[k] < self.rhat_max and self.ess[k] > self.ess_min))

    def to_dict(self):
        return {"passed": self.passed, "rhat_max": self.rhat_max, "ess_min": self.ess_min,
                "worst_rhat": self.worst_rhat, "min_ess": self.min_ess,
                "failures": self.failures(), "degenerate": list(self.degenerate),
                "weakly_identified": list(self.weakly_identified),
                "draws_per_chain": self.draws_per_chain, "rhat": dict(self.rhat), "ess": dict(self.ess)}


def convergence_report(samples: PosteriorSamples) -> ConvergenceReport:
    rh, es, degenerate = {}, {}, []
    for name, v in samples.parameters().items():
        chains = samples.by_chain(v)
        rh[name] = r_hat(chains)
        es[name] = ess(chains)
        if is_degenerate(chains):
            degenerate.append(name)
    weak = []
    if samples.hospitals.size < 3:
        weak.append("sigma_h2")
    if samples.regions.size < 3:
        weak.append("sigma_r2")
    return ConvergenceReport(rh, es, tuple(degenerate), tuple(weak),
                             samples.n_draws // samples.n_chains)


# sampler ------------------------------------------------------------------


class _Problem:
    """Sufficient statistics of the fitting data."""

    def __init__(self, f, y, h_idx, r_idx, n_h, n_r, hospital_region):
        self.f, self.y, self.h_idx, self.r_idx = f, y, h_idx, r_idx
        self.N, self.H, self.R = y.size, n_h, n_r
        self.P = 2 + n_r
        self.hospital_region = hospital_region
        cnt_h = np.bincount(h_idx, minlength=n_h).astype(float)
        cnt_r = np.bincount(r_idx, minlength=n_r).astype(float)
        sf_r = np.bincount(r_idx, weights=f, minlength=n_r)
        # Gram matrix of the (1, f, region one-hot) design
        G = np.diag(np.concatenate(([self.N, f @ f], cnt_r)))
        G[0, 1] = G[1, 0] = f.sum()
        G[0, 2:] = G[2:, 0] = cnt_r
        G[1, 2:] = G[2:, 1] = sf_r
        self.G = G
        # cross products of that design with the hospital one-hot
        C = np.zeros((self.P, n_h))
        C[0] = cnt_h
        C[1] = np.bincount(h_idx, weights=f, minlength=n_h)
        C[2 + hospital_region, np.arange(n_h)] = cnt_h
        self.C = C
        self.cnt_h = cnt_h
        self.b_theta = np.concatenate(([y.sum(), f @ y],
                                       np.bincount(r_idx, weights=y, minlength=n_r)))
        self.b_alpha = np.bincount(h_idx, weights=y, minlength=n_h)

    def sse(self, theta, alpha):
        e = (self.y - theta[0] - theta[1] * self.f - alpha[self.h_idx]
             - theta[2:][self.r_idx])
        return float(e @ e)


def _shift_normal(z, rng):
    u = np.clip(special.ndtr(z), _U_EPS, 1 - _U_EPS)
    u = (u + rng.uniform(0.25, 0.75, size=np.shape(z))) % 1.0
    return special.ndtri(np.clip(u, _U_EPS, 1 - _U_EPS))


def _precision(prob, spec, var):
    """Conditional precision and scaled data vector of x = (beta0, beta1, gamma, alpha)."""
    s2, sh2, sr2 = var
    P = prob.P
    Q = np.zeros((P + prob.H, P + prob.H))
    Q[:P, :P] = prob.G / s2 + np.diag(np.concatenate(
        ([1 / spec.beta0_scale**2, 1 / spec.beta1_scale**2], np.full(prob.R, 1.0 / sr2))))
    Q[:P, P:] = prob.C / s2
    Q[P:, :P] = Q[:P, P:].T
    Q[P:, P:] = np.diag(prob.cnt_h / s2 + 1.0 / sh2)
    return Q, np.concatenate((prob.b_theta, prob.b_alpha)) / s2


def _draw_locations(prob, spec, var, x, rng):
    """Joint Gaussian draw of x = (beta0, beta1, gamma, alpha) given variances.

    Antithetic moves act on coordinates whitened by the symmetric square
    root of the conditional correlation matrix, which keeps every
    parameter as close as possible to a single whitened coordinate.
    """
    Q, b = _precision(prob, spec, var)
    cov = linalg.cho_solve(linalg.cho_factor(Q, lower=True),
                           np.eye(Q.shape[0]), overwrite_b=True)
    mean = cov @ b
    sd = np.sqrt(np.diag(cov))
    lam, V = linalg.eigh(cov / np.outer(sd, sd))
    lam = np.clip(lam, 1e-300, None)
    if spec.overrelax:
        z = (V / np.sqrt(lam)) @ (V.T @ ((x - mean) / sd))
        z = _shift_normal(z, rng)
    else:
        z = rng.standard_normal(mean.size)
    return mean + sd * ((V * np.sqrt(lam)) @ (V.T @ z))


class _CollapsedTarget:
    """Log density of v = log(variance) of one effect block, locations integrated out.

    With S0 = U diag(lam) U' the Schur complement of the block in the
    prior-free precision and c = U' (b_J - Q_JK Q_KK^-1 b_K), the marginal
    is proportional to the half-normal prior times
    prod (1 + lam t)^(-1/2) exp(c^2 t / (2 (1 + lam t))) with t = exp(v).
    """

    def __init__(self, Q, b, block, prior_var, scale):
        Q = Q.copy()
        Q[block, block] -= 1.0 / prior_var
        rest = np.setdiff1d(np.arange(Q.shape[0]), block)
        fac = linalg.cho_factor(Q[np.ix_(rest, rest)], lower=True)
        cross = Q[np.ix_(block, rest)]
        S0 = Q[np.ix_(block, block)] - cross @ linalg.cho_solve(fac, cross.T)
        lam, U = linalg.eigh(S0)
        self.lam = np.clip(lam, 0.0, None)
        self.c2 = (U.T @ (b[block] - cross @ linalg.cho_solve(fac, b[rest])))**2
        self.psi = 0.5 / scale**2

    def __call__(self, v):
        t = np.exp(np.asarray(v, dtype=float))[..., None]
        lt = self.lam * t
        val = (-0.5 * np.log1p(lt) + 0.5 * self.c2 * t / (1.0 + lt)).sum(axis=-1)
        return val + 0.5 * np.log(t[..., 0]) - self.psi * t[..., 0]


class _PiecewiseExp:
    """Density proportional to exp of the linear interpolation of ``logd`` on ``grid``."""

    def __init__(self, grid, logd):
        self.grid, self.step = grid, grid[1] - grid[0]
        self.l = logd - logd.max()
        self.a = np.diff(self.l)
        mass = self.step * np.exp(self.l[:-1]) * _exprel(self.a)
        self.cum = np.concatenate(([0.0], np.cumsum(mass)))
        self.total = self.cum[-1]

    def _seg(self, v):
        k = int(np.clip((v - self.grid[0]) // self.step, 0, self.grid.size - 2))
        return k, (v - self.grid[k]) / self.step

    def logpdf(self, v):
        k, t = self._seg(v)
        return self.l[k] + self.a[k] * t - np.log(self.total)

    def cdf(self, v):
        k, t = self._seg(v)
        part = self.step * np.exp(self.l[k]) * t * _exprel(self.a[k] * t)
        return (self.cum[k] + part) / self.total

    def ppf(self, u):
        r = u * self.total
        k = int(np.clip(np.searchsorted(self.cum, r, side="right") - 1, 0, self.grid.size - 2))
        x = (r - self.cum[k]) / (self.step * np.exp(self.l[k]))
        a = self.a[k]
        t = x if abs(a) < 1e-12 else np.log1p(a * x) / a
        return self.grid[k] + self.step * min(max(t, 0.0), 1.0)


def _exprel(a):
    a = np.asarray(a, dtype=float)
    small = np.abs(a) < 1e-8
    return np.where(small, 1.0 + a / 2, np.expm1(a) / np.where(small, 1.0, a))


def _collapsed_move(target, current, lo, hi, n_grid, rng):
    """Antithetic Metropolis-Hastings move on v = log(variance).

    The proposal rotates the quantile of ``current`` under a grid
    approximation of the target, and the acceptance step corrects for the
    approximation.  Values outside the grid are left unchanged.
    """
    v = np.log(current)
    if not lo < v < hi:
        return current
    grid = np.linspace(lo, hi, n_grid)
    q = _PiecewiseExp(grid, target(grid))
    u = q.cdf(v)
    v_new = q.ppf((u + rng.uniform(0.25, 0.75)) % 1.0)
    log_ratio = target(v_new) - target(v) + q.logpdf(v) - q.logpdf(v_new)
    if np.log(rng.uniform()) < log_ratio:
        return float(np.exp(v_new))
    return current


def _gig(lam, chi, psi, size, rng):
    chi = max(chi, 1e-300)
    return stats.geninvgauss.rvs(lam, np.sqrt(chi * psi), scale=np.sqrt(chi / psi),
                                 size=size, random_state=rng)


def _draw_variance(current, m, ss, scale, spec, rng):
    lam = (1.0 - m) / 2.0
    psi = 1.0 / scale**2
    if not spec.overrelax:
        return float(_gig(lam, ss, psi, 1, rng)[0])
    cand = np.append(_gig(lam, ss, psi, spec.n_order, rng), current)
    order = np.argsort(cand, kind="stable")
    rank = int(np.nonzero(order == cand.size - 1)[0][0])
    return float(cand[order[(rank + (cand.size // 2)) % cand.size]])


_VARIANCES = ("sigma2", "sigma_h2", "sigma_r2")


def _scale_draw(std, counts, resid_sums, s2, prior_scale, current, overrelax, rng):
    """Gaussian conditional of a signed scale multiplying standardized effects."""
    prec = (counts * std * std).sum() / s2 + 1.0 / prior_scale**2
    mean = (std * resid_sums).sum() / s2 / prec
    if overrelax:
        return mean + _shift_normal((current - mean) * np.sqrt(prec), rng) / np.sqrt(prec)
    return mean + rng.standard_normal() / np.sqrt(prec)


class _Chain:
    """One resumable Gibbs chain."""

    def __init__(self, prob, spec, seed_seq, fixed):
        self.prob, self.spec, self.fixed = prob, spec, fixed
        self.rng = np.random.default_rng(seed_seq)
        base = float(np.var(prob.y - prob.f)) or 1.0
        # over-dispersed starting variances
        self.var = [base * np.exp(self.rng.uniform(-1, 1)),
                    base * np.exp(self.rng.uniform(-2, 1)),
                    base * np.exp(self.rng.uniform(-2, 1))]
        for j, name in enumerate(_VARIANCES):
            if name in fixed:
                self.var[j] = fixed[name]
        self.x = np.zeros(prob.P + prob.H)
        self.lo = np.log(base) - 30.0

    def step(self):
        prob, spec, var, rng = self.prob, self.spec, self.var, self.rng
        if spec.collapse:
            self._collapsed()
        self.x = _draw_locations(prob, spec, var, self.x, rng)
        theta, alpha = self.x[:prob.P], self.x[prob.P:]
        gamma = theta[2:]
        stats_ = ((prob.N, prob.sse(theta, alpha), spec.sigma_scale),
                  (prob.H, float(alpha @ alpha), spec.sigma_h_scale),
                  (prob.R, float(gamma @ gamma), spec.sigma_r_scale))
        for j, (m, ss, scale) in enumerate(stats_):
            if _VARIANCES[j] not in self.fixed and not (spec.collapse and j > 0):
                var[j] = _draw_variance(var[j], m, ss, scale, spec, rng)
        if spec.interweave and not spec.collapse:
            self._interweave()

    def _collapsed(self):
        # cluster variances drawn with all locations integrated out; the
        # location draw that follows completes a joint update
        prob, spec, var = self.prob, self.spec, self.var
        P = prob.P
        blocks = ((1, np.arange(P, P + prob.H), spec.sigma_h_scale),
                  (2, np.arange(2, P), spec.sigma_r_scale))
        for j, block, scale in blocks:
            if _VARIANCES[j] in self.fixed:
                continue
            Q, b = _precision(prob, spec, var)
            target = _CollapsedTarget(Q, b, block, var[j], scale)
            var[j] = max(_collapsed_move(target, var[j], self.lo, np.log(scale**2) + 6.0,
                                         spec.n_grid, self.rng), _VAR_FLOOR)

    def _interweave(self):
        # redraw each cluster scale given the standardized effects; a signed
        # scale with a N(0, scale^2) prior is the half-normal prior on |scale|.
        # The sign of the current scale is randomized first so that the
        # rotation move sees a draw from the augmented posterior.
        prob, spec, var, rng, x = self.prob, self.spec, self.var, self.rng, self.x
        P = prob.P
        theta = x[:P]
        if "sigma_h2" not in self.fixed:
            cur = np.sqrt(var[1]) * rng.choice((-1.0, 1.0))
            std = x[P:] / cur
            e = prob.b_alpha - prob.C.T @ theta
            s = _scale_draw(std, prob.cnt_h, e, var[0], spec.sigma_h_scale, cur,
                            spec.overrelax, rng)
            x[P:] = s * std
            var[1] = max(s * s, _VAR_FLOOR)
        if "sigma_r2" not in self.fixed:
            cur = np.sqrt(var[2]) * rng.choice((-1.0, 1.0))
            std = x[2:P] / cur
            e = (prob.b_theta[2:] - prob.G[2:, 0] * theta[0] - prob.G[2:, 1] * theta[1]
                 - prob.C[2:] @ x[P:])
            s = _scale_draw(std, prob.G[0, 2:], e, var[0], spec.sigma_r_scale, cur,
                            spec.overrelax, rng)
            x[2:P] = s * std
            var[2] = max(s * s, _VAR_FLOOR)

    def run(self, n_iter, keep=True):
        prob = self.prob
        out = np.empty((n_iter if keep else 0, 5 + prob.H + prob.R))
        for k in range(n_iter):
            self.step()
            if keep:
                theta = self.x[:prob.P]
                out[k, :2] = theta[:2]
                out[k, 2:5] = self.var
                out[k, 5:5 + prob.H] = self.x[prob.P:]
                out[k, 5 + prob.H:] = theta[2:]
        return out


def fit_bayes(f_hat, hospital, region, y, spec: BayesModelSpec | None = None, fixed=None):
    """Sample the posterior of the hierarchical calibration model.

    Parameters
    ----------
    f_hat : array of shape (n,)
        Forest predictions for the fitting rows.
    hospital, region : array-like of shape (n,)
        Cluster ids; hospitals must nest within regions.
    y : array of shape (n,)
    spec : BayesModelSpec, optional
    fixed : dict, optional
        Variances to hold at given values instead of sampling, keyed by
        ``"sigma2"``, ``"sigma_h2"`` or ``"sigma_r2"``.

    Returns
    -------
    samples : PosteriorSamples
    report : ConvergenceReport
        Not raised on failure; check ``report.passed``.
    """
    spec = spec or BayesModelSpec()
    fixed = dict(fixed or {})
    if set(fixed) - set(_VARIANCES) or any(not v > 0 for v in fixed.values()):
        raise ConfigError(f"fixed must map names in {_VARIANCES} to positive values")
    f = np.asarray(f_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    hospital = np.asarray(hospital).astype(str)
    region = np.asarray(region).astype(str)
    n = y.size
    if f.shape != (n,) or hospital.shape != (n,) or region.shape != (n,):
        raise FitError("f_hat, hospital, region and y must have equal length")
    if n < 50:
        raise FitError(f"at least 50 rows are required, got {n}")
    if not (np.isfinite(f).all() and np.isfinite(y).all()):
        raise FitError("inputs must be finite")
    if np.ptp(y) == 0:
        raise FitError("outcome is constant")
    hospitals, h_idx = np.unique(hospital, return_inverse=True)
    regions, r_idx = np.unique(region, return_inverse=True)
    if hospitals.size < 2:
        raise FitError("at least 2 hospitals are required")
    hospital_region = np.full(hospitals.size, -1)
    for h, r in zip(h_idx, r_idx):
        if hospital_region[h] not in (-1, r):
            raise FitError(f"hospital {hospitals[h]!r} appears in more than one region")
        hospital_region[h] = r
    prob = _Problem(f, y, h_idx, r_idx, hospitals.size, regions.size, hospital_region)
    seqs = np.random.SeedSequence(entropy=int(spec.seed) & (2**64 - 1),
                                  spawn_key=(2000,)).spawn(spec.chains)
    chains = [_Chain(prob, spec, ss, fixed) for ss in seqs]
    for c in chains:
        c.run(spec.warmup, keep=False)
    kept = [c.run(spec.draws) for c in chains]
    while True:
        samples = _pack(kept, hospitals, regions, regions[hospital_region])
        report = convergence_report(samples)
        n_kept = kept[0].shape[0]
        if report.passed or n_kept >= spec.resolved_max_draws:
            return samples, report
        extra = min(n_kept, spec.resolved_max_draws - n_kept)
        kept = [np.vstack((k, c.run(extra))) for k, c in zip(kept, chains)]


def _pack(kept, hospitals, regions, hospital_region):
    H = hospitals.size
    draws = np.vstack(kept)
    return PosteriorSamples(
        beta0=draws[:, 0].copy(), beta1=draws[:, 1].copy(), sigma2=draws[:, 2].copy(),
        sigma_h2=draws[:, 3].copy(), sigma_r2=draws[:, 4].copy(),
        alpha=draws[:, 5:5 + H].copy(), gamma=draws[:, 5 + H:].copy(),
        chain=np.repeat(np.arange(len(kept)), kept[0].shape[0]),
        hospitals=hospitals, regions=regions, hospital_region=hospital_region,
    )


# posterior predictive -----------------------------------------------------


def _lookup(keys, ids):
    pos = np.clip(np.searchsorted(keys, ids), 0, keys.size - 1)
    known = keys[pos] == ids
    return pos, known


def posterior_predictive(samples: PosteriorSamples, f_hat, hospital, region,
                         method="analytic", n_replicates=1, seed=0, chunk=2048):
    """Posterior predictive mean and SD for each row.

    ``method="analytic"`` returns the exact SD of the draw mixture::

        Var_draws(mu) + E[sigma^2] (+ E[sigma_h^2] if the hospital is unseen)
                                   (+ E[sigma_r^2] if the region is unseen)

    ``method="monte_carlo"`` simulates ``n_replicates`` outcomes per draw
    (fresh cluster effects for unseen clusters) and takes their SD.
    """
    f = np.atleast_1d(np.asarray(f_hat, dtype=float))
    hospital = np.atleast_1d(np.asarray(hospital).astype(str))
    region = np.atleast_1d(np.asarray(region).astype(str))
    if not (f.shape == hospital.shape == region.shape) or f.ndim != 1:
        raise InputError("f_hat, hospital and region must be equal-length vectors")
    if method not in ("analytic", "monte_carlo"):
        raise InputError(f"unknown method {method!r}")
    if n_replicates < 1:
        raise InputError("n_replicates must be >= 1")
    h_pos, h_known = _lookup(samples.hospitals, hospital)
    r_pos, r_known = _lookup(samples.regions, region)
    mean = np.empty(f.size)
    sd = np.empty(f.size)
    rng = np.random.default_rng(seed)
    b0 = samples.beta0[:, None]
    b1 = samples.beta1[:, None]
    for lo in range(0, f.size, chunk):
        sl = slice(lo, lo + chunk)
        mu = (b0 + b1 * f[None, sl]
              + np.where(h_known[sl], samples.alpha[:, h_pos[sl]], 0.0)
              + np.where(r_known[sl], samples.gamma[:, r_pos[sl]], 0.0))
        mean[sl] = mu.mean(axis=0)
        if method == "analytic":
            var = (mu.var(axis=0) + samples.sigma2.mean()
                   + np.where(h_known[sl], 0.0, samples.sigma_h2.mean())
                   + np.where(r_known[sl], 0.0, samples.sigma_r2.mean()))
            sd[sl] = np.sqrt(var)
        else:
            shape = (n_replicates,) + mu.shape
            noise_var = (samples.sigma2[:, None]
                         + np.where(h_known[sl], 0.0, samples.sigma_h2[:, None])
                         + np.where(r_known[sl], 0.0, samples.sigma_r2[:, None]))
            rep = mu[None] + rng.standard_normal(shape) * np.sqrt(noise_var)[None]
            sd[sl] = rep.reshape(-1, mu.shape[1]).std(axis=0)
    return mean, sd


def posterior_predictive_sigma(samples, f_hat, hospital, region, **kwargs):
    return posterior_predictive(samples, f_hat, hospital, region, **kwargs)[1]


class BayesianCalibrator(BaseEstimator):
    """Estimator wrapper around :func:`fit_bayes`.

    ``fit(f_hat, y, hospital, region)``; ``predict`` returns the posterior
    predictive mean, and with ``return_std=True`` also the predictive SD.
    """

    def __init__(self, beta0_scale=10.0, beta1_scale=10.0, sigma_scale=5.0,
                 sigma_h_scale=5.0, sigma_r_scale=5.0, chains=2, warmup=500, draws=250,
                 seed=0, max_draws=2000, overrelax=True, interweave=True,
                 collapse=True):
        self.beta0_scale = beta0_scale
        self.beta1_scale = beta1_scale
        self.sigma_scale = sigma_scale
        self.sigma_h_scale = sigma_h_scale
        self.sigma_r_scale = sigma_r_scale
        self.chains = chains
        self.warmup = warmup
        self.draws = draws
        self.seed = seed
        self.max_draws = max_draws
        self.overrelax = overrelax
        self.interweave = interweave
        self.collapse = collapse

    @property
    def spec_(self):
        return BayesModelSpec(**self.get_params())

    def fit(self, f_hat, y, hospital, region):
        self.samples_, self.report_ = fit_bayes(f_hat, hospital, region, y, self.spec_)
        return self

    def predict(self, f_hat, hospital, region, return_std=False):
        if not hasattr(self, "samples_"):
            raise FitError("calibrator is not fitted")
        mean, sd = posterior_predictive(self.samples_, f_hat, hospital, region)
        return (mean, sd) if return_std else mean
