"""Hierarchical datasets: ingestion, preprocessing, splitting, simulation.

Rows are patients nested in hospitals nested in regions.  Storage is
columnar (numpy arrays); :class:`PatientRecord` gives a row view when one
is needed.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import yaml
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    ConfigError,
    DataError,
    DecompositionError,
    NestingError,
    ParseError,
    StratificationError,
)

logger = logging.getLogger(__name__)

FEATURE_KINDS = ("continuous", "ordinal")
N_STRATA = 5


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PatientRecord:
    features: np.ndarray
    hospital_id: str
    region_id: str
    outcome: float


@dataclass(frozen=True, eq=False)
class HierarchicalDataset:
    """Patients with features, cluster keys and a nonnegative outcome.

    Parameters
    ----------
    X : ndarray of shape (n, p)
        Features; ``nan`` marks a missing cell.
    hospital, region : ndarray of shape (n,)
        Cluster keys (coerced to ``str``).
    y : ndarray of shape (n,)
        Outcome (length of stay, days).
    feature_names : sequence of str
    hierarchy : mapping hospital -> region
        Must cover every hospital in ``hospital``.
    feature_kinds : sequence of {"continuous", "ordinal"}, optional
    noise_scale : ndarray of shape (n,), optional
        Generating noise SD per row (simulated data only).
    hospital_attributes : mapping attribute -> (mapping hospital -> value)
        Hospital-level metadata used for subgroup reports.
    """

    X: np.ndarray
    hospital: np.ndarray
    region: np.ndarray
    y: np.ndarray
    feature_names: tuple
    hierarchy: Mapping[str, str]
    feature_kinds: tuple = None
    noise_scale: np.ndarray = None
    hospital_attributes: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError(f"X must be 2-d, got shape {X.shape}")
        n, p = X.shape
        hospital = np.asarray(self.hospital).astype(str)
        region = np.asarray(self.region).astype(str)
        y = np.asarray(self.y, dtype=float)
        if hospital.shape != (n,) or region.shape != (n,) or y.shape != (n,):
            raise DataError("X, hospital, region and y must have the same number of rows")
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != p:
            raise DataError(f"{len(names)} feature names for {p} feature columns")
        kinds = self.feature_kinds
        kinds = ("continuous",) * p if kinds is None else tuple(kinds)
        if len(kinds) != p or any(k not in FEATURE_KINDS for k in kinds):
            raise DataError(f"feature_kinds must be {p} entries from {FEATURE_KINDS}")
        if not np.all(np.isfinite(y)):
            raise DataError("outcomes must be finite")
        if n and y.min() < 0:
            raise DataError("outcomes must be nonnegative")
        if np.isinf(X).any():
            raise DataError("features must be finite or missing (nan)")
        hierarchy = {str(k): str(v) for k, v in dict(self.hierarchy).items()}
        _check_nesting(hospital, region, hierarchy)
        if len(np.unique(hospital)) < 2:
            raise DataError("a hierarchical dataset needs at least 2 hospitals")
        noise = None
        if self.noise_scale is not None:
            noise = np.asarray(self.noise_scale, dtype=float)
            if noise.shape != (n,):
                raise DataError("noise_scale must have one entry per row")
        attrs = {
            str(a): {str(h): str(v) for h, v in m.items()}
            for a, m in dict(self.hospital_attributes).items()
        }
        set_ = object.__setattr__
        set_(self, "X", _readonly(X))
        set_(self, "hospital", _readonly(hospital))
        set_(self, "region", _readonly(region))
        set_(self, "y", _readonly(y))
        set_(self, "feature_names", names)
        set_(self, "feature_kinds", kinds)
        set_(self, "hierarchy", hierarchy)
        set_(self, "noise_scale", None if noise is None else _readonly(noise))
        set_(self, "hospital_attributes", attrs)

    def __len__(self):
        return self.y.shape[0]

    def __iter__(self) -> Iterator[PatientRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i) -> PatientRecord:
        return PatientRecord(self.X[i], self.hospital[i], self.region[i], float(self.y[i]))

    @property
    def records(self):
        return list(self)

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def hospitals(self):
        return np.unique(self.hospital)

    @property
    def regions(self):
        return np.unique(self.region)

    @property
    def missing_mask(self):
        return np.isnan(self.X)

    def subset(self, indices) -> "HierarchicalDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return self._replace(
            X=self.X[idx],
            hospital=self.hospital[idx],
            region=self.region[idx],
            y=self.y[idx],
            noise_scale=None if self.noise_scale is None else self.noise_scale[idx],
        )

    def with_outcomes(self, y) -> "HierarchicalDataset":
        return self._replace(y=y)

    def with_features(self, X, feature_names, feature_kinds) -> "HierarchicalDataset":
        return self._replace(X=X, feature_names=feature_names, feature_kinds=feature_kinds)

    def group_values(self, attribute) -> np.ndarray:
        """Per-row value of ``attribute`` ("hospital", "region" or a hospital attribute)."""
        if attribute == "hospital":
            return self.hospital
        if attribute == "region":
            return self.region
        if attribute not in self.hospital_attributes:
            known = ["hospital", "region", *sorted(self.hospital_attributes)]
            raise ConfigError(f"unknown grouping attribute {attribute!r}; known: {known}")
        table = self.hospital_attributes[attribute]
        return np.array([table.get(h, "unknown") for h in self.hospital])

    def _replace(self, **changes):
        kwargs = dict(
            X=self.X,
            hospital=self.hospital,
            region=self.region,
            y=self.y,
            feature_names=self.feature_names,
            hierarchy=self.hierarchy,
            feature_kinds=self.feature_kinds,
            noise_scale=self.noise_scale,
            hospital_attributes=self.hospital_attributes,
        )
        kwargs.update(changes)
        return HierarchicalDataset(**kwargs)


def _check_nesting(hospital, region, hierarchy):
    seen = {}
    for h, r in zip(hospital.tolist(), region.tolist()):
        prev = seen.setdefault(h, r)
        if prev != r:
            raise NestingError(f"hospital {h!r} appears in regions {prev!r} and {r!r}")
    for h, r in seen.items():
        if h not in hierarchy:
            raise NestingError(f"hospital {h!r} missing from the hierarchy mapping")
        if hierarchy[h] != r:
            raise NestingError(
                f"hospital {h!r} is mapped to region {hierarchy[h]!r} but rows say {r!r}"
            )


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Column roles for :func:`load_csv`.

    ``features`` maps column name to ``"continuous"`` or ``"ordinal"``;
    ``hospital_attributes`` names hospital-level columns kept as metadata.
    """

    outcome: str
    hospital: str
    region: str
    features: Mapping[str, str]
    hospital_attributes: Sequence[str] = ()

    def __post_init__(self):
        feats = dict(self.features)
        if not feats:
            raise ConfigError("schema needs at least one feature column")
        for name, kind in feats.items():
            if kind not in FEATURE_KINDS:
                raise ConfigError(f"feature {name!r}: kind must be one of {FEATURE_KINDS}")
        roles = [self.outcome, self.hospital, self.region, *feats, *self.hospital_attributes]
        if len(set(roles)) != len(roles):
            raise ConfigError("a column may play only one role in the schema")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "hospital_attributes", tuple(self.hospital_attributes))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        allowed = {"outcome", "hospital", "region", "features", "hospital_attributes"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        feats = d.get("features")
        if isinstance(feats, (list, tuple)):
            feats = {f: "continuous" for f in feats}
        try:
            return cls(
                outcome=d["outcome"],
                hospital=d["hospital"],
                region=d["region"],
                features=feats or {},
                hospital_attributes=d.get("hospital_attributes", ()),
            )
        except KeyError as exc:
            raise ConfigError(f"schema is missing {exc.args[0]!r}") from None

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self):
        return {
            "outcome": self.outcome,
            "hospital": self.hospital,
            "region": self.region,
            "features": dict(self.features),
            "hospital_attributes": list(self.hospital_attributes),
        }


def _parse_float(text, what, line):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{what}: cannot parse {text!r} as a number", row=line) from None


def load_csv(path, schema) -> HierarchicalDataset:
    """Read a dataset CSV; empty feature cells become ``nan`` (not imputed)."""
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    feats = list(schema.features)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        except csv.Error as exc:
            raise ParseError(str(exc), row=1) from None
        header = [h.strip() for h in header]
        col = {name: i for i, name in enumerate(header)}
        needed = [schema.outcome, schema.hospital, schema.region, *feats, *schema.hospital_attributes]
        missing = [c for c in needed if c not in col]
        if missing:
            raise ParseError(f"header lacks columns {missing}", row=1)
        X, hosp, reg, y = [], [], [], []
        attr_rows = {a: [] for a in schema.hospital_attributes}
        line = 1
        try:
            for row in reader:
                line = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"expected {len(header)} fields, found {len(row)}", row=line
                    )
                out = row[col[schema.outcome]].strip()
                if not out:
                    raise ParseError("missing outcome", row=line)
                y.append(_parse_float(out, schema.outcome, line))
                h = row[col[schema.hospital]].strip()
                r = row[col[schema.region]].strip()
                if not h or not r:
                    raise ParseError("missing hospital or region id", row=line)
                hosp.append(h)
                reg.append(r)
                vals = []
                for f in feats:
                    cell = row[col[f]].strip()
                    vals.append(np.nan if cell == "" else _parse_float(cell, f, line))
                X.append(vals)
                for a in schema.hospital_attributes:
                    attr_rows[a].append(row[col[a]].strip())
        except csv.Error as exc:
            raise ParseError(str(exc), row=line) from None
    if not y:
        raise DataError(f"{path}: no data rows")
    hosp = np.array(hosp)
    reg = np.array(reg)
    hierarchy = {}
    for h, r in zip(hosp.tolist(), reg.tolist()):
        if hierarchy.setdefault(h, r) != r:
            raise NestingError(f"hospital {h!r} appears in regions {hierarchy[h]!r} and {r!r}")
    attributes = {}
    for a, values in attr_rows.items():
        table = {}
        for h, v in zip(hosp.tolist(), values):
            if table.setdefault(h, v) != v:
                raise DataError(f"attribute {a!r} varies within hospital {h!r}")
        attributes[a] = table
    return HierarchicalDataset(
        X=np.array(X, dtype=float).reshape(len(y), len(feats)),
        hospital=hosp,
        region=reg,
        y=np.array(y),
        feature_names=feats,
        hierarchy=hierarchy,
        feature_kinds=[schema.features[f] for f in feats],
        hospital_attributes=attributes,
    )


def write_csv(dataset, path, schema=None):
    """Write ``dataset`` as CSV (features..., attributes..., hospital, region, outcome).

    Returns the matching :class:`Schema`.
    """
    attrs = sorted(dataset.hospital_attributes)
    schema = schema or Schema(
        outcome="los",
        hospital="hospital",
        region="region",
        features=dict(zip(dataset.feature_names, dataset.feature_kinds)),
        hospital_attributes=attrs,
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*dataset.feature_names, *attrs, schema.hospital, schema.region, schema.outcome])
        attr_cols = [dataset.group_values(a) for a in attrs]
        for i in range(len(dataset)):
            feats = ["" if np.isnan(v) else repr(float(v)) for v in dataset.X[i]]
            w.writerow(
                [*feats, *(c[i] for c in attr_cols), dataset.hospital[i], dataset.region[i],
                 repr(float(dataset.y[i]))]
            )
    return schema


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessPlan:
    """Imputation and z-standardization learned on training rows.

    ``keep`` indexes the input columns that survive (constant columns are
    dropped); the other arrays are aligned with ``keep``.
    """

    input_names: tuple
    keep: np.ndarray
    impute: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    kinds: tuple

    @property
    def feature_names(self):
        return tuple(self.input_names[i] for i in self.keep)

    @property
    def dropped(self):
        kept = set(self.keep.tolist())
        return tuple(n for i, n in enumerate(self.input_names) if i not in kept)

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.input_names):
            raise DataError(
                f"expected {len(self.input_names)} feature columns, got shape {X.shape}"
            )
        Z = X[:, self.keep]
        Z = np.where(np.isnan(Z), self.impute, Z)
        return (Z - self.mean) / self.scale


class Preprocessor(TransformerMixin, BaseEstimator):
    """Mean/median imputation followed by z-standardization.

    Parameters
    ----------
    kinds : sequence of {"continuous", "ordinal"}, optional
        Continuous columns are imputed with the mean, ordinal ones with the
        median.  Defaults to all continuous.
    constant_tol : float
        Columns whose (population) SD is at or below this are dropped.
    """

    def __init__(self, kinds=None, constant_tol=1e-12):
        self.kinds = kinds
        self.constant_tol = constant_tol

    def fit(self, X, y=None, feature_names=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise DataError("preprocessing needs a non-empty 2-d training matrix")
        p = X.shape[1]
        kinds = tuple(self.kinds) if self.kinds is not None else ("continuous",) * p
        names = tuple(feature_names) if feature_names is not None else tuple(
            f"x{j}" for j in range(p)
        )
        impute = np.empty(p)
        for j in range(p):
            obs = X[~np.isnan(X[:, j]), j]
            if obs.size == 0:
                raise DataError(f"feature {names[j]!r} has no observed values; cannot impute")
            impute[j] = np.median(obs) if kinds[j] == "ordinal" else obs.mean()
        filled = np.where(np.isnan(X), impute, X)
        mean = filled.mean(axis=0)
        sd = filled.std(axis=0)
        keep = np.flatnonzero(sd > self.constant_tol)
        dropped = [names[j] for j in range(p) if sd[j] <= self.constant_tol]
        if dropped:
            warnings.warn(f"dropping constant feature columns: {dropped}", stacklevel=2)
        self.plan_ = PreprocessPlan(
            input_names=names,
            keep=keep,
            impute=impute[keep],
            mean=mean[keep],
            scale=sd[keep],
            kinds=tuple(kinds[j] for j in keep),
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "plan_")
        return self.plan_.transform(X)


def fit_preprocess(train: HierarchicalDataset) -> PreprocessPlan:
    if len(train) == 0:
        raise DataError("empty training set")
    pre = Preprocessor(kinds=train.feature_kinds)
    return pre.fit(train.X, feature_names=train.feature_names).plan_


def apply_preprocess(plan: PreprocessPlan, dataset: HierarchicalDataset) -> HierarchicalDataset:
    if tuple(dataset.feature_names) != tuple(plan.input_names):
        raise DataError("dataset features do not match the preprocessing plan")
    return dataset.with_features(plan.transform(dataset.X), plan.feature_names, plan.kinds)


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    calib: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "calib", "test"):
            object.__setattr__(self, name, _readonly(np.sort(np.asarray(getattr(self, name), dtype=np.intp))))

    @property
    def n(self):
        return self.train.size + self.calib.size + self.test.size

    def validate(self, n):
        both = np.concatenate([self.train, self.calib, self.test])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise DataError("split is not a partition of the row indices")

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        for part in (self.train, self.calib, self.test):
            h.update(np.asarray(part, dtype="<i8").tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]


def outcome_strata(y, n_strata=N_STRATA):
    """Quantile-bin index per row from outcome ranks (ties broken by row order)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    rank = np.empty(n, dtype=np.intp)
    rank[np.argsort(y, kind="stable")] = np.arange(n)
    return rank * n_strata // max(n, 1)


def _even_pick(m, k):
    # k of m positions spread evenly (Bresenham), so strata stay balanced
    i = np.arange(m)
    return ((i + 1) * k // m) > (i * k // m)


def _calib_count(n, n_test, frac_calib=0.16, frac_train=0.64):
    target = frac_calib * n
    for c in sorted({int(np.floor(target)), int(np.ceil(target)), int(round(target)) - 1,
                     int(round(target)) + 1}, key=lambda c: abs(c - target)):
        if 0 <= c <= n - n_test and abs(c - target) <= 1 and abs(n - n_test - c - frac_train * n) <= 1:
            return c
    return int(round((n - n_test) * frac_calib / (frac_calib + frac_train)))


def stratified_kfold(data, k=5, seed=0) -> list:
    """K folds stratified on outcome quintiles, each with a train/calib split.

    The test fold holds ~1/k of the rows; the remaining rows are split so
    that, for k=5, train/calib/test are 64%/16%/20% of the data.

    Parameters
    ----------
    data : HierarchicalDataset or array-like of outcomes
    k : int
    seed : int
    """
    y = data.y if isinstance(data, HierarchicalDataset) else np.asarray(data, dtype=float)
    if k < 2:
        raise ConfigError("k must be at least 2")
    n = y.size
    strata = outcome_strata(y)
    counts = np.bincount(strata, minlength=N_STRATA)
    if counts.min() < k:
        raise StratificationError(
            f"each outcome quintile needs at least k={k} rows; smallest has {counts.min()}"
        )
    rng = np.random.default_rng(seed)
    key = rng.permutation(n)
    order = np.lexsort((key, strata))
    fold_of = np.empty(n, dtype=np.intp)
    fold_of[order] = np.arange(n) % k
    plans = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        rest = np.flatnonzero(fold_of != f)
        n_calib = _calib_count(n, test.size, 0.2 * (1 - 1 / k), 0.8 * (1 - 1 / k))
        sub_key = np.random.default_rng([seed, f]).permutation(rest.size)
        rest_order = rest[np.lexsort((sub_key, strata[rest]))]
        pick = _even_pick(rest.size, n_calib)
        plans.append(SplitPlan(train=rest_order[~pick], calib=rest_order[pick], test=test))
    return plans


def random_split(n, seed=0, fractions=(0.64, 0.16, 0.20)) -> SplitPlan:
    """Unstratified train/calib/test split with the given fractions."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_calib = int(round(fractions[1] * n))
    return SplitPlan(perm[:n_train], perm[n_train:n_train + n_calib], perm[n_train + n_calib:])


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the clustered length-of-stay simulator.

    ``shares`` are the (patient, hospital, region) fractions of outcome
    variance; the patient share is split between a feature-driven signal
    (``signal_fraction`` of it) and noise.
    """

    n_patients: int = 5000
    n_hospitals: int = 50
    n_regions: int = 4
    n_features: int = 8
    shares: tuple = (0.467, 0.125, 0.408)
    total_variance: float = 50.6
    skew: bool = False
    heteroscedastic: bool = False
    seed: int = 0
    signal_fraction: float = 0.5
    base: float = 4.9
    size_dispersion: float = 0.75
    hetero_ratio: float = 3.0
    missing_rate: float = 0.0

    def __post_init__(self):
        shares = tuple(float(s) for s in self.shares)
        object.__setattr__(self, "shares", shares)
        if len(shares) != 3 or min(shares) < 0 or abs(sum(shares) - 1) > 1e-9:
            raise ConfigError("shares must be 3 nonnegative numbers summing to 1")
        if not (self.n_hospitals >= self.n_regions >= 1):
            raise ConfigError("need n_hospitals >= n_regions >= 1")
        if self.n_hospitals < 2:
            raise ConfigError("need at least 2 hospitals")
        if self.n_patients < 2 * self.n_hospitals:
            raise ConfigError("need at least 2 patients per hospital")
        if self.n_features < 1:
            raise ConfigError("need at least one feature")
        if self.total_variance <= 0:
            raise ConfigError("total_variance must be positive")
        if self.n_regions < 2 and shares[2] > 0:
            raise ConfigError("a positive region share needs at least 2 regions")
        if not 0 <= self.signal_fraction <= 1:
            raise ConfigError("signal_fraction must lie in [0, 1]")
        if self.hetero_ratio < 1:
            raise ConfigError("hetero_ratio must be >= 1")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("missing_rate must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic-data keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        from dataclasses import asdict

        d = asdict(self)
        d["shares"] = list(self.shares)
        return d


def _largest_remainder(total, weights):
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(np.intp)
    short = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def _standardize(v):
    v = v - v.mean()
    sd = v.std(ddof=1)
    return v / sd if sd > 0 else v


def _signal(X):
    p = X.shape[1]
    w = 1.0 / np.arange(1, p + 1)
    s = X @ w
    if p >= 2:
        s = s + 0.5 * X[:, 0] * X[:, 1]
    if p >= 3:
        s = s + np.sin(2.0 * X[:, 2])
    return _standardize(s)


def generate_synthetic(config: SyntheticConfig) -> HierarchicalDataset:
    """Simulate clustered outcomes with a prescribed variance decomposition.

    outcome = base + region effect + hospital effect + signal(x) + noise.
    Cluster effects are realised with exact moment matching (weighted
    sample variance equal to the target), so the variance shares are
    recovered by :func:`icc_decomposition` up to noise sampling error.
    Outcomes are shifted by a constant when needed to keep them
    nonnegative; shifts leave every variance component unchanged.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    N, H, R = c.n_patients, c.n_hospitals, c.n_regions
    share_p, share_h, share_r = c.shares
    total = c.total_variance

    weights = rng.lognormal(0.0, c.size_dispersion, H)
    sizes = 2 + _largest_remainder(N - 2 * H, weights)
    region_of = np.empty(H, dtype=np.intp)
    first = rng.permutation(H)
    region_of[first[:R]] = np.arange(R)
    region_of[first[R:]] = rng.integers(0, R, H - R)

    hosp_idx = rng.permutation(np.repeat(np.arange(H), sizes))
    reg_idx = region_of[hosp_idx]
    n_r = np.bincount(reg_idx, minlength=R).astype(float)

    gamma = np.zeros(R)
    if share_r > 0:
        g = rng.standard_normal(R)
        g -= (n_r * g).sum() / N
        denom = N - (n_r ** 2).sum() / N
        gamma = g * np.sqrt(share_r * total * denom / (n_r * g ** 2).sum())

    alpha = np.zeros(H)
    if share_h > 0 and H > R:
        a = rng.standard_normal(H)
        n_h = sizes.astype(float)
        for r in range(R):
            m = region_of == r
            a[m] -= (n_h[m] * a[m]).sum() / n_h[m].sum()
        denom = N - sum((n_h[region_of == r] ** 2).sum() / n_r[r] for r in range(R) if n_r[r] > 0)
        alpha = a * np.sqrt(share_h * total * denom / (n_h * a ** 2).sum())

    X = rng.standard_normal((N, c.n_features))
    signal = _signal(X) * np.sqrt(c.signal_fraction * share_p * total)

    z = rng.standard_normal(N)
    if c.skew:
        z = np.exp(0.75 * z)
    z = _standardize(z)
    noise_sd = np.sqrt((1.0 - c.signal_fraction) * share_p * total)
    scale = np.ones(N)
    if c.heteroscedastic:
        # smallest hospitals are noisiest: factor runs from hetero_ratio down to 1
        size_rank = np.empty(H)
        size_rank[np.argsort(sizes, kind="stable")] = np.arange(H) / max(H - 1, 1)
        factor = c.hetero_ratio ** (1.0 - size_rank)
        scale = factor[hosp_idx]
        scale = scale / np.sqrt(np.mean(scale ** 2))
    noise_scale = noise_sd * scale
    y = c.base + gamma[reg_idx] + alpha[hosp_idx] + signal + noise_scale * z
    if y.min() < 0:
        y = y - y.min()

    if c.missing_rate > 0:
        X = X.copy()
        X[rng.random(X.shape) < c.missing_rate] = np.nan

    hosp_names = np.array([f"H{h:04d}" for h in range(H)])
    reg_names = np.array([f"R{r + 1}" for r in range(R)])
    terciles = np.quantile(sizes, [1 / 3, 2 / 3])
    bed = np.where(sizes <= terciles[0], "small", np.where(sizes <= terciles[1], "medium", "large"))
    return HierarchicalDataset(
        X=X,
        hospital=hosp_names[hosp_idx],
        region=reg_names[reg_idx],
        y=y,
        feature_names=[f"x{j}" for j in range(c.n_features)],
        hierarchy={hosp_names[h]: reg_names[region_of[h]] for h in range(H)},
        noise_scale=noise_scale,
        hospital_attributes={"bed_size": dict(zip(hosp_names.tolist(), bed.tolist()))},
    )


# --------------------------------------------------------------------------
# Variance decomposition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IccResult:
    patient: float
    hospital: float
    region: float
    total_variance: float
    components: tuple  # raw (patient, hospital, region) estimates before clamping

    @property
    def shares(self):
        return (self.patient, self.hospital, self.region)


def icc_decomposition(data) -> IccResult:
    """Method-of-moments variance shares for patients in hospitals in regions.

    Uses the unbalanced nested ANOVA expected mean squares; negative
    component estimates are clamped to zero before normalising.
    """
    y = np.asarray(data.y, dtype=float)
    hosp_codes, h_idx = np.unique(data.hospital, return_inverse=True)
    reg_codes, r_idx = np.unique(data.region, return_inverse=True)
    N, H, R = y.size, hosp_codes.size, reg_codes.size
    if H < 2:
        raise DecompositionError("need at least 2 hospitals")
    n_r = np.bincount(r_idx, minlength=R).astype(float)
    if R < 2 or (n_r >= 2).sum() < 2:
        raise DecompositionError("need at least 2 regions with 2 or more rows each")
    if H <= R:
        raise DecompositionError("need more hospitals than regions")
    if N <= H:
        raise DecompositionError("need more rows than hospitals")
    n_h = np.bincount(h_idx, minlength=H).astype(float)
    reg_of_h = np.zeros(H, dtype=np.intp)
    reg_of_h[h_idx] = r_idx

    mean_all = y.mean()
    mean_h = np.bincount(h_idx, weights=y, minlength=H) / n_h
    mean_r = np.bincount(r_idx, weights=y, minlength=R) / n_r

    ss_w = ((y - mean_h[h_idx]) ** 2).sum()
    ss_h = (n_h * (mean_h - mean_r[reg_of_h]) ** 2).sum()
    ss_r = (n_r * (mean_r - mean_all) ** 2).sum()
    ms_w = ss_w / (N - H)
    ms_h = ss_h / (H - R)
    ms_r = ss_r / (R - 1)

    sum_nh2_over_nr = (np.bincount(reg_of_h, weights=n_h ** 2, minlength=R) / n_r).sum()
    c1 = (N - sum_nh2_over_nr) / (H - R)
    c2 = (sum_nh2_over_nr - (n_h ** 2).sum() / N) / (R - 1)
    c3 = (N - (n_r ** 2).sum() / N) / (R - 1)

    var_p = ms_w
    var_h = (ms_h - ms_w) / c1
    var_r = (ms_r - ms_w - c2 * var_h) / c3
    raw = (float(var_p), float(var_h), float(var_r))
    comp = np.clip(np.array(raw), 0.0, None)
    if comp.sum() <= 0:
        raise DecompositionError("all variance components are zero")
    shares = comp / comp.sum()
    return IccResult(
        patient=float(shares[0]),
        hospital=float(shares[1]),
        region=float(shares[2]),
        total_variance=float(y.var(ddof=1)),
        components=raw,
    )
