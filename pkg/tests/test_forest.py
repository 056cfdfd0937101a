import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierconformal.exceptions import ConfigError, FitError, PredictError
from hierconformal.forest import (ForestConfig, RandomForest, RegressionTree, fit_forest,
                                  predict_forest)


def test_constant_target():
    X = np.random.default_rng(0).normal(size=(50, 3))
    f = fit_forest(X, np.full(50, 5.0), ForestConfig(n_trees=5))
    assert all(t.is_leaf.all() or np.all(t.value[t.is_leaf] == 5.0) for t in f.trees_)
    np.testing.assert_array_equal(f.predict(np.random.default_rng(1).normal(size=(7, 3))), 5.0)


def test_forced_split():
    f = fit_forest(np.array([[0.0], [1.0]]), np.array([0.0, 10.0]),
                   ForestConfig(n_trees=1, max_depth=1, bootstrap=False, min_samples_leaf=1))
    tree = f.trees_[0]
    assert tree.node_count == 3
    assert tree.threshold[0] == 0.5
    np.testing.assert_array_equal(f.predict(np.array([[0.0], [1.0]])), [0.0, 10.0])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 32), p=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_unlimited_tree_interpolates(n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = rng.normal(size=n)
    f = fit_forest(X, y, ForestConfig(n_trees=1, max_depth=None, min_samples_leaf=1,
                                      bootstrap=False, mtry=p))
    np.testing.assert_array_equal(f.predict(X), y)


def _brute_best_split(x, y, min_leaf):
    # exhaustive search over midpoints, minimizing summed squared error
    best = (np.inf, None)
    xs = np.unique(x)
    for a, b in zip(xs[:-1], xs[1:]):
        t = (a + b) / 2
        left, right = y[x <= t], y[x > t]
        if left.size < min_leaf or right.size < min_leaf:
            continue
        sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
        if sse < best[0] - 1e-9:
            best = (sse, t)
    return best[1]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(4, 40), seed=st.integers(0, 2**31))
def test_root_split_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 12, n).astype(float)
    y = rng.normal(size=n) + (x > 5) * 3
    t = _brute_best_split(x, y, 2)
    f = fit_forest(x[:, None], y, ForestConfig(n_trees=1, max_depth=1, min_samples_leaf=2,
                                               bootstrap=False))
    tree = f.trees_[0]
    if t is None:
        assert tree.node_count == 1
    else:
        assert tree.threshold[0] == pytest.approx(t)


def test_mean_of_trees():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 2))
    y = rng.normal(size=60)
    f = fit_forest(X, y, ForestConfig(n_trees=2))
    Xt = rng.normal(size=(9, 2))
    per_tree = f.predict_trees(Xt)
    np.testing.assert_allclose(f.predict(Xt), per_tree.mean(axis=0), rtol=0, atol=1e-12)


def test_mean_of_two_handmade_trees():
    leaf = dict(feature=np.array([-1]), threshold=np.array([0.0]), left=np.array([-1]),
                right=np.array([-1]), n_samples=np.array([1]))
    f = RandomForest(n_trees=2)
    f.trees_ = [RegressionTree(value=np.array([1.0]), **leaf),
                RegressionTree(value=np.array([3.0]), **leaf)]
    f.n_features_in_, f.mtry_ = 1, 1
    f._pack()
    assert predict_forest(f, np.array([[0.3]]))[0] == 2.0


def test_empty_input():
    f = fit_forest(np.random.default_rng(0).normal(size=(20, 2)), np.arange(20.0),
                   ForestConfig(n_trees=3))
    assert f.predict(np.empty((0, 2))).shape == (0,)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(80, 3)), rng.normal(size=80)
    f = fit_forest(X, y, ForestConfig(n_trees=7, seed=3))
    g = RandomForest.from_bytes(f.to_bytes())
    np.testing.assert_array_equal(f.predict(X), g.predict(X))
    f.save(tmp_path / "f.npz")
    np.testing.assert_array_equal(RandomForest.load(tmp_path / "f.npz").predict(X), f.predict(X))


def test_seed_determinism():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(100, 4)), rng.normal(size=100)
    a = fit_forest(X, y, ForestConfig(n_trees=5, seed=9)).predict(X)
    b = fit_forest(X, y, ForestConfig(n_trees=5, seed=9)).predict(X)
    c = fit_forest(X, y, ForestConfig(n_trees=5, seed=10)).predict(X)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_min_samples_leaf_respected():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(200, 3)), rng.normal(size=200)
    f = fit_forest(X, y, ForestConfig(n_trees=3, max_depth=None, min_samples_leaf=7,
                                      bootstrap=False))
    for t in f.trees_:
        assert t.n_samples[t.is_leaf].min() >= 7


def test_depth_limit():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(300, 3)), rng.normal(size=300)
    f = fit_forest(X, y, ForestConfig(n_trees=2, max_depth=3, min_samples_leaf=1))
    assert max(t.depth for t in f.trees_) <= 3


def test_sklearn_params():
    f = RandomForest(n_trees=4, max_depth=2)
    assert f.get_params()["n_trees"] == 4
    assert f.config == ForestConfig(n_trees=4, max_depth=2)


@pytest.mark.parametrize("kw", [{"n_trees": 0}, {"max_depth": 0}, {"min_samples_leaf": 0},
                                {"mtry": 0}])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        ForestConfig(**kw)


def test_fit_errors():
    with pytest.raises(FitError):
        fit_forest(np.array([[np.nan], [1.0], [2.0]]), np.arange(3.0),
                   ForestConfig(min_samples_leaf=1))
    with pytest.raises(FitError):
        fit_forest(np.zeros((3, 1)), np.arange(3.0))  # fewer than 2 * min_samples_leaf


def test_predict_wrong_width():
    f = fit_forest(np.random.default_rng(0).normal(size=(20, 2)), np.arange(20.0),
                   ForestConfig(n_trees=2))
    with pytest.raises(PredictError):
        f.predict(np.zeros((3, 5)))
