"""Hierarchical random forest: sequential residual fitting across levels.

Level 1 fits patient features to the outcome.  Each later level fits the
residual left by the levels before it, on patient features augmented
with encodings of the cluster identities seen so far.  A prediction is
the sum of the level outputs.

Cluster identity is presented to the trees as two columns per cluster
level: the mean training residual of that cluster (target encoding) and
the cluster's training row count.  Clusters unseen at fit time get the
row-weighted training average of both columns.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import HierarchicalDataset
from .exceptions import ConfigError, FitError, NestingError, PredictError
from .forest import ForestConfig, RandomForest

FORMAT_TAG = "hierconformal.hrf/1"
LEVELS = ("patient", "hospital", "region")
DEFAULT_FORESTS = {
    "patient": ForestConfig(n_trees=100, max_depth=15),
    "hospital": ForestConfig(n_trees=75, max_depth=12),
    "region": ForestConfig(n_trees=50, max_depth=10),
}


@dataclass(frozen=True)
class HierarchySpec:
    """Ordered model levels and the forest used at each.

    ``levels`` must start with ``"patient"`` and follow patient -> hospital
    -> region order; hospital or region may be omitted.
    """

    levels: tuple = LEVELS
    forests: dict = field(default_factory=dict)

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels or levels[0] != "patient":
            raise ConfigError("the first level must be 'patient'")
        if any(lv not in LEVELS for lv in levels):
            raise ConfigError(f"levels must come from {LEVELS}")
        order = [LEVELS.index(lv) for lv in levels]
        if order != sorted(set(order)):
            raise ConfigError("levels must be strictly ordered patient -> hospital -> region")
        forests = {}
        for lv in levels:
            cfg = dict(self.forests).get(lv, DEFAULT_FORESTS[lv])
            forests[lv] = cfg if isinstance(cfg, ForestConfig) else ForestConfig.from_dict(cfg)
        extra = set(dict(self.forests)) - set(levels)
        if extra:
            raise ConfigError(f"forest settings given for absent levels: {sorted(extra)}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "forests", forests)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"levels", "forests"}
        if unknown:
            raise ConfigError(f"unknown hierarchy keys: {sorted(unknown)}")
        return cls(levels=tuple(d.get("levels", LEVELS)), forests=d.get("forests", {}))

    def to_dict(self):
        return {"levels": list(self.levels),
                "forests": {lv: cfg.to_dict() for lv, cfg in self.forests.items()}}


@dataclass(frozen=True, eq=False)
class ClusterEncoding:
    """Target-mean and size encoding of one cluster level."""

    keys: np.ndarray
    means: np.ndarray
    sizes: np.ndarray
    neutral_mean: float
    neutral_size: float

    @classmethod
    def fit(cls, ids, target):
        keys, inv = np.unique(np.asarray(ids).astype(str), return_inverse=True)
        sizes = np.bincount(inv).astype(float)
        means = np.bincount(inv, weights=target) / sizes
        return cls(keys, means, sizes, float(np.mean(target)), float(np.mean(sizes[inv])))

    def transform(self, ids):
        ids = np.asarray(ids).astype(str)
        pos = np.searchsorted(self.keys, ids)
        pos = np.clip(pos, 0, max(self.keys.size - 1, 0))
        known = self.keys[pos] == ids if self.keys.size else np.zeros(ids.shape, bool)
        means = np.where(known, self.means[pos], self.neutral_mean)
        sizes = np.where(known, self.sizes[pos], self.neutral_size)
        return np.column_stack([means, sizes]), known


def _check_nested(hospital, region):
    seen = {}
    for h, r in zip(hospital.tolist(), region.tolist()):
        if seen.setdefault(h, r) != r:
            raise NestingError(f"hospital {h!r} appears in regions {seen[h]!r} and {r!r}")


def _derive_seed(seed, index):
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(1000 + index,))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class HierarchicalRandomForest(RegressorMixin, BaseEstimator):
    """Sum of per-level random forests fitted to successive residuals.

    Parameters
    ----------
    spec : HierarchySpec, optional
        Levels and per-level forest settings; defaults to the three-level
        patient -> hospital -> region model.
    seed : int
        Master seed; each level's forest seed is derived from it.

    Attributes
    ----------
    forests_ : list of RandomForest
    encoders_ : list of dict level -> ClusterEncoding
        Encodings used as extra columns by each level (empty for patient).
    """

    def __init__(self, spec=None, seed=0):
        self.spec = spec
        self.seed = seed

    @property
    def spec_(self):
        return self.spec if self.spec is not None else HierarchySpec()

    def _design(self, X, ids, encoders):
        cols = [X]
        for lv in ("hospital", "region"):
            if lv in encoders:
                enc, _ = encoders[lv].transform(ids[lv])
                cols.append(enc)
        return np.ascontiguousarray(np.hstack(cols))

    def fit(self, X, y, hospital=None, region=None):
        spec = self.spec_
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise FitError("empty training data")
        if not np.isfinite(X).all():
            raise FitError("features must be finite; impute before fitting")
        n = X.shape[0]
        ids = {}
        if "hospital" in spec.levels or "region" in spec.levels:
            if hospital is None or region is None:
                raise FitError("hospital and region ids are required for cluster levels")
        if hospital is not None:
            ids["hospital"] = np.asarray(hospital).astype(str)
            ids["region"] = np.asarray(region).astype(str)
            if ids["hospital"].shape != (n,) or ids["region"].shape != (n,):
                raise FitError("cluster id arrays must have one entry per row")
            _check_nested(ids["hospital"], ids["region"])
        resid = y.copy()
        forests, encoders = [], []
        for i, lv in enumerate(spec.levels):
            enc = {}
            if lv != "patient":
                for prev in spec.levels[1:i + 1]:
                    enc[prev] = ClusterEncoding.fit(ids[prev], resid)
            Z = self._design(X, ids, enc)
            cfg = replace(spec.forests[lv], seed=_derive_seed(self.seed, i))
            forest = RandomForest.from_config(cfg).fit(Z, resid)
            resid = resid - forest.predict(Z)
            forests.append(forest)
            encoders.append(enc)
        self.forests_ = forests
        self.encoders_ = encoders
        self.levels_ = spec.levels
        self.n_features_in_ = X.shape[1]
        self.train_residual_ = resid
        return self

    def predict_levels(self, X, hospital=None, region=None):
        """Per-level contributions, shape (n, n_levels)."""
        check_is_fitted(self, "forests_")
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise PredictError(
                f"expected {self.n_features_in_} feature columns, got shape {X.shape}"
            )
        ids = {}
        if len(self.levels_) > 1:
            if hospital is None or region is None:
                raise PredictError("hospital and region ids are required for cluster levels")
            ids = {"hospital": np.asarray(hospital).astype(str),
                   "region": np.asarray(region).astype(str)}
        out = np.empty((X.shape[0], len(self.forests_)))
        for j, (forest, enc) in enumerate(zip(self.forests_, self.encoders_)):
            out[:, j] = forest.predict(self._design(X, ids, enc))
        return out

    def predict(self, X, hospital=None, region=None):
        parts = self.predict_levels(X, hospital, region)
        total = parts[:, 0].copy()
        for j in range(1, parts.shape[1]):
            total += parts[:, j]
        return total

    # serialization ---------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "forests_")
        arrays = {"format": np.array(FORMAT_TAG)}
        meta = {"levels": list(self.levels_), "seed": int(self.seed),
                "spec": self.spec_.to_dict(), "n_features": self.n_features_in_,
                "encoders": [sorted(enc) for enc in self.encoders_]}
        arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        for i, (forest, enc) in enumerate(zip(self.forests_, self.encoders_)):
            arrays.update(forest.to_arrays(prefix=f"L{i}_"))
            for lv, e in enc.items():
                p = f"L{i}_enc_{lv}_"
                arrays[p + "keys"] = e.keys
                arrays[p + "means"] = e.means
                arrays[p + "sizes"] = e.sizes
                arrays[p + "neutral"] = np.array([e.neutral_mean, e.neutral_size])
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            if str(data["format"]) != FORMAT_TAG:
                raise ValueError(f"unsupported model format {str(data['format'])!r}")
            meta = json.loads(str(data["meta"]))
            model = cls(spec=HierarchySpec.from_dict(meta["spec"]), seed=meta["seed"])
            model.levels_ = tuple(meta["levels"])
            model.n_features_in_ = int(meta["n_features"])
            model.forests_, model.encoders_ = [], []
            for i, enc_levels in enumerate(meta["encoders"]):
                model.forests_.append(RandomForest.from_arrays(data, prefix=f"L{i}_"))
                enc = {}
                for lv in enc_levels:
                    p = f"L{i}_enc_{lv}_"
                    neutral = data[p + "neutral"]
                    enc[lv] = ClusterEncoding(data[p + "keys"].astype(str), data[p + "means"],
                                              data[p + "sizes"], float(neutral[0]),
                                              float(neutral[1]))
                model.encoders_.append(enc)
        return model

    def to_bytes(self):
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        return cls.load(io.BytesIO(blob))


def fit_hrf(train: HierarchicalDataset, spec: HierarchySpec | None = None, seed=0):
    if len(train) == 0:
        raise FitError("empty training set")
    missing = set(train.hospitals.tolist()) - set(train.hierarchy)
    if missing:
        raise FitError(f"hospitals absent from the hierarchy mapping: {sorted(missing)[:5]}")
    return HierarchicalRandomForest(spec=spec, seed=seed).fit(
        train.X, train.y, train.hospital, train.region
    )


def predict_hrf(model: HierarchicalRandomForest, data: HierarchicalDataset) -> np.ndarray:
    return model.predict(data.X, data.hospital, data.region)
