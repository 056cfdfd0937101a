"""CART regression trees and bagged random forests.

Trees are grown by exact variance reduction over midpoints of sorted
distinct feature values, on ``mtry`` randomly drawn candidate features
per node.  Each tree draws its bootstrap sample and feature order from a
seed derived from ``(seed, tree index)``, so results do not depend on the
order in which trees are built.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import _tree
from .exceptions import ConfigError, FitError, PredictError

FORMAT_TAG = "hierconformal.forest/1"


@dataclass(frozen=True)
class ForestConfig:
    """Hyperparameters of one random forest.

    ``max_depth=None`` grows until leaves are pure or too small.
    ``mtry=None`` resolves to ``max(1, n_features // 3)`` at fit time.
    """

    n_trees: int = 100
    max_depth: int | None = 15
    min_samples_leaf: int = 5
    mtry: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1 (or None for unlimited)")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be >= 1")

    def resolve_mtry(self, n_features):
        mtry = max(1, n_features // 3) if self.mtry is None else self.mtry
        if mtry > n_features:
            raise ConfigError(f"mtry={mtry} exceeds the number of features ({n_features})")
        return mtry

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown forest keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _tree_seed(seed, index):
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(index),))


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def node_count(self):
        return self.feature.size

    @property
    def is_leaf(self):
        return self.feature == _tree.LEAF

    @property
    def depth(self):
        depth = np.zeros(self.node_count, dtype=np.int64)
        for node in range(self.node_count):
            if not self.is_leaf[node]:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.empty(X.shape[0])
        offsets = np.array([0, self.node_count], dtype=np.int64)
        return _tree.predict_packed(X, self.feature, self.threshold, self.left, self.right,
                                    self.value, offsets, out)


def fit_tree(X, y, sample_idx, config: ForestConfig, mtry, seed_seq) -> RegressionTree:
    node_seed = int(seed_seq.generate_state(1, dtype=np.uint64)[0])
    max_depth = -1 if config.max_depth is None else int(config.max_depth)
    arrays = _tree.build_tree(X, y, sample_idx.astype(np.int64), max_depth,
                              int(config.min_samples_leaf), int(mtry), np.uint64(node_seed))
    return RegressionTree(*arrays)


class RandomForest(RegressorMixin, BaseEstimator):
    """Bagged CART regression forest.

    Parameters mirror :class:`ForestConfig`.

    Attributes
    ----------
    trees_ : list of RegressionTree
    n_features_in_ : int
    mtry_ : int
    """

    def __init__(self, n_trees=100, max_depth=15, min_samples_leaf=5, mtry=None,
                 bootstrap=True, seed=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.mtry = mtry
        self.bootstrap = bootstrap
        self.seed = seed

    @classmethod
    def from_config(cls, config: ForestConfig):
        return cls(**config.to_dict())

    @property
    def config(self):
        return ForestConfig(n_trees=self.n_trees, max_depth=self.max_depth,
                            min_samples_leaf=self.min_samples_leaf, mtry=self.mtry,
                            bootstrap=self.bootstrap, seed=self.seed)

    def fit(self, X, y):
        config = self.config
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise FitError(f"cannot fit a forest on data of shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise FitError("X and y have inconsistent lengths")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise FitError("forest inputs must be finite (impute first)")
        n = X.shape[0]
        if n < 2 * config.min_samples_leaf:
            raise FitError(
                f"need at least 2 * min_samples_leaf = {2 * config.min_samples_leaf} rows, got {n}"
            )
        mtry = config.resolve_mtry(X.shape[1])
        trees = []
        for t in range(config.n_trees):
            ss = _tree_seed(config.seed, t)
            boot_ss, node_ss = ss.spawn(2)
            if config.bootstrap:
                idx = np.random.default_rng(boot_ss).integers(0, n, n)
            else:
                idx = np.arange(n)
            trees.append(fit_tree(X, y, idx, config, mtry, node_ss))
        self.trees_ = trees
        self.n_features_in_ = X.shape[1]
        self.mtry_ = mtry
        self._pack()
        return self

    def _pack(self):
        trees = self.trees_
        self._offsets = np.zeros(len(trees) + 1, dtype=np.int64)
        self._offsets[1:] = np.cumsum([t.node_count for t in trees])
        self._packed = tuple(
            np.concatenate([getattr(t, name) for t in trees])
            for name in ("feature", "threshold", "left", "right", "value")
        )

    def predict(self, X):
        check_is_fitted(self, "trees_")
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise PredictError(
                f"expected {self.n_features_in_} feature columns, got shape {X.shape}"
            )
        out = np.empty(X.shape[0])
        if X.shape[0] == 0:
            return out
        return _tree.predict_packed(X, *self._packed, self._offsets, out)

    def predict_trees(self, X):
        """Per-tree predictions, shape (n_trees, n_rows)."""
        check_is_fitted(self, "trees_")
        X = np.ascontiguousarray(X, dtype=np.float64)
        return np.stack([t.predict(X) for t in self.trees_])

    # serialization ---------------------------------------------------------

    def to_arrays(self, prefix=""):
        check_is_fitted(self, "trees_")
        meta = {"config": self.config.to_dict(), "n_features": self.n_features_in_,
                "mtry": self.mtry_}
        arrays = {f"{prefix}meta": np.array(json.dumps(meta, sort_keys=True)),
                  f"{prefix}offsets": self._offsets}
        for name in ("feature", "threshold", "left", "right", "value", "n_samples"):
            arrays[f"{prefix}{name}"] = np.concatenate([getattr(t, name) for t in self.trees_])
        return arrays

    @classmethod
    def from_arrays(cls, arrays, prefix=""):
        meta = json.loads(str(arrays[f"{prefix}meta"]))
        forest = cls.from_config(ForestConfig.from_dict(meta["config"]))
        offsets = np.asarray(arrays[f"{prefix}offsets"])
        cols = {name: np.asarray(arrays[f"{prefix}{name}"])
                for name in ("feature", "threshold", "left", "right", "value", "n_samples")}
        forest.trees_ = [
            RegressionTree(**{k: v[offsets[t]:offsets[t + 1]].copy() for k, v in cols.items()})
            for t in range(offsets.size - 1)
        ]
        forest.n_features_in_ = int(meta["n_features"])
        forest.mtry_ = int(meta["mtry"])
        forest._pack()
        return forest

    def save(self, path):
        np.savez(path, format=np.array(FORMAT_TAG), **self.to_arrays())

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            tag = str(data["format"])
            if tag != FORMAT_TAG:
                raise ValueError(f"unsupported forest format {tag!r}")
            return cls.from_arrays(data)

    def to_bytes(self):
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        return cls.load(io.BytesIO(blob))


def fit_forest(X, y, config: ForestConfig | None = None) -> RandomForest:
    return RandomForest.from_config(config or ForestConfig()).fit(X, y)


def predict_forest(model: RandomForest, X) -> np.ndarray:
    return model.predict(X)
