import numpy as np
import pytest

from hierconformal.diagnostics import (ess, is_degenerate, mcse_mean, mcse_sd, r_hat,
                                       rank_normalize, split_chains)
from hierconformal.exceptions import InputError


def _ar1(rng, rho, n, chains=2):
    x = np.empty((chains, n))
    x[:, 0] = rng.standard_normal(chains)
    eps = rng.standard_normal((chains, n)) * np.sqrt(1 - rho**2)
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + eps[:, t]
    return x


def test_rhat_iid_chains(rng):
    assert r_hat(rng.standard_normal((2, 1000))) < 1.01


def test_rhat_separated_chains(rng):
    x = rng.standard_normal((2, 500))
    x[1] += 10
    assert r_hat(x) > 1.1


def test_rhat_detects_scale_difference(rng):
    # same mean, different spread: only the folded statistic sees it
    x = rng.standard_normal((2, 2000))
    x[1] *= 3
    assert r_hat(x) > 1.05


def test_ess_iid(rng):
    e = ess(rng.standard_normal(1000))
    assert 700 <= e <= 1300


@pytest.mark.parametrize("rho", [0.5, 0.8])
def test_ess_ar1_matches_theory(rho):
    x = _ar1(np.random.default_rng(7), rho, 20000)
    theory = x.size * (1 - rho) / (1 + rho)
    assert ess(x, method="basic") == pytest.approx(theory, rel=0.15)


def test_ess_antithetic_exceeds_n(rng):
    x = _ar1(rng, -0.5, 5000)
    assert ess(x, method="basic") > x.size


def test_degenerate_draws():
    x = np.full((2, 100), 3.0)
    assert is_degenerate(x)
    assert r_hat(x) == 1.0
    assert ess(x) == 200


def test_split_chains_shape():
    assert split_chains(np.zeros((2, 11))).shape == (4, 5)


def test_rank_normalize_is_normal_scores(rng):
    z = rank_normalize(rng.exponential(size=(2, 500)))
    assert abs(z.mean()) < 1e-10
    assert z.std() == pytest.approx(1.0, abs=0.02)


def test_mcse_iid(rng):
    x = rng.standard_normal((4, 2500))
    assert mcse_mean(x) == pytest.approx(1 / np.sqrt(x.size), rel=0.1)
    assert mcse_sd(x) == pytest.approx(1 / np.sqrt(2 * x.size), rel=0.15)


def test_input_errors():
    with pytest.raises(InputError):
        r_hat(np.zeros(100))  # one chain
    with pytest.raises(InputError):
        ess(np.array([1.0, np.nan, 2.0, 3.0, 4.0]))
