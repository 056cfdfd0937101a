"""Config-driven cross-validated experiments.

For each fold: preprocess, fit the hierarchical forest, the Bayesian
calibrator and the isotonic sigma map on the training rows, calibrate
conformal quantiles on the calibration rows, and evaluate every method on
the test rows.

Methods
-------
conformal
    ``y_hat +/- q_hat`` with ``q_hat`` from absolute residuals.
bayesian
    ``mean_bayes +/- z * sigma_raw``: the central Gaussian posterior
    predictive interval (raw, uncalibrated sigma).
hybrid
    ``y_hat +/- q_hat * max(sigma**gamma, eps)`` with ``q_hat`` from
    sigma-weighted residuals.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from scipy import special

from . import __version__
from .bayes import BayesModelSpec, fit_bayes, posterior_predictive
from .conformal import (DEFAULT_EPSILON, CalibrationStrategy, calibrate, conformity_scores,
                        predict_interval, weighted_scores)
from .data import (HierarchicalDataset, Schema, SplitPlan, SyntheticConfig, apply_preprocess,
                   fit_preprocess, generate_synthetic, icc_decomposition, load_csv,
                   stratified_kfold)
from .exceptions import (ConfigError, ConvergenceGateError, DataError, DecompositionError,
                         HierConformalError)
from .hrf import HierarchySpec, fit_hrf, predict_hrf
from .isotonic import apply_isotonic, fit_isotonic
from .metrics import MetricReport, _nan_to_none, evaluate, uncertainty_quality

FORMAT_TAG = "hierconformal.run/1"
METHODS = ("conformal", "bayesian", "hybrid")
DEFAULT_ALPHAS = (0.01, 0.05, 0.10, 0.20)
SIGMA_SOURCES = ("calibrated", "raw")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DataSource:
    """Either a CSV file with its schema, or a synthetic generator config."""

    csv: str | None = None
    schema: dict | None = None
    synthetic: SyntheticConfig | None = None

    def __post_init__(self):
        if (self.csv is None) == (self.synthetic is None):
            raise ConfigError("data must give exactly one of 'csv' or 'synthetic'")
        if self.csv is not None and self.schema is None:
            raise ConfigError("a CSV data source needs a 'schema'")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d or {})
        unknown = set(d) - {"csv", "schema", "synthetic"}
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        if "synthetic" in d:
            return cls(synthetic=SyntheticConfig.from_dict(d["synthetic"] or {}))
        path = d.get("csv")
        schema = d.get("schema")
        if path is not None and base_dir is not None:
            path = str(Path(base_dir, path))
        if isinstance(schema, str):
            schema_path = Path(base_dir, schema) if base_dir is not None else Path(schema)
            schema = Schema.from_file(schema_path).to_dict()
        return cls(csv=path, schema=schema)

    def to_dict(self):
        if self.synthetic is not None:
            return {"synthetic": self.synthetic.to_dict()}
        return {"csv": self.csv, "schema": dict(self.schema)}

    def load(self) -> HierarchicalDataset:
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        return load_csv(self.csv, Schema.from_dict(self.schema))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``raw_sigma_scale`` multiplies the posterior predictive SD before use
    (1.0 leaves it unchanged); ``sigma_source`` selects which sigma weights
    the hybrid scores.  The isotonic sigma map is fitted on training
    rows against out-of-fold residuals from ``isotonic_folds`` inner
    forest fits.  ``min_group_size`` is the subgroup-report
    threshold below which groups are flagged.
    """

    data: DataSource
    hierarchy: HierarchySpec = field(default_factory=HierarchySpec)
    bayes: BayesModelSpec = field(default_factory=BayesModelSpec)
    strategy: CalibrationStrategy = field(default_factory=CalibrationStrategy)
    alphas: tuple = DEFAULT_ALPHAS
    gamma: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    methods: tuple = METHODS
    k: int = 5
    seed: int = 0
    out: str | None = None
    sigma_source: str = "calibrated"
    raw_sigma_scale: float = 1.0
    isotonic_folds: int = 5
    allow_unconverged: bool = False
    min_group_size: int = 30

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas or any(not 0 < a < 1 for a in alphas):
            raise ConfigError("alphas must be a non-empty list of values in (0, 1)")
        if len(set(alphas)) != len(alphas):
            raise ConfigError("alphas must be distinct")
        methods = tuple(self.methods)
        if not methods or any(m not in METHODS for m in methods) or len(set(methods)) != len(
                methods):
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}")
        if not 0 <= self.gamma <= 2:
            raise ConfigError("gamma must lie in [0, 2]")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.sigma_source not in SIGMA_SOURCES:
            raise ConfigError(f"sigma_source must be one of {SIGMA_SOURCES}")
        if not self.raw_sigma_scale > 0:
            raise ConfigError("raw_sigma_scale must be positive")
        if self.isotonic_folds < 2:
            raise ConfigError("isotonic_folds must be >= 2")
        if self.min_group_size < 1:
            raise ConfigError("min_group_size must be >= 1")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "methods", methods)

    FIELDS = ("data", "hierarchy", "bayes", "strategy", "alphas", "gamma", "epsilon",
              "methods", "k", "seed", "out", "sigma_source", "raw_sigma_scale",
              "isotonic_folds", "allow_unconverged", "min_group_size")

    @classmethod
    def from_dict(cls, d, base_dir=None):
        d = dict(d or {})
        unknown = set(d) - set(cls.FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "data" not in d:
            raise ConfigError("config needs a 'data' section")
        kw = {k: v for k, v in d.items() if k not in ("data", "hierarchy", "bayes", "strategy")}
        kw["data"] = DataSource.from_dict(d["data"], base_dir)
        if "hierarchy" in d:
            kw["hierarchy"] = HierarchySpec.from_dict(d["hierarchy"] or {})
        if "bayes" in d:
            kw["bayes"] = BayesModelSpec.from_dict(d["bayes"] or {})
        if "strategy" in d:
            kw["strategy"] = CalibrationStrategy.parse(d["strategy"])
        for key in ("alphas", "methods"):
            if key in kw:
                if not isinstance(kw[key], (list, tuple)):
                    raise ConfigError(f"{key} must be a list")
                kw[key] = tuple(kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                d = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self):
        return {
            "data": self.data.to_dict(), "hierarchy": self.hierarchy.to_dict(),
            "bayes": self.bayes.to_dict(), "strategy": str(self.strategy),
            "alphas": list(self.alphas), "gamma": self.gamma, "epsilon": self.epsilon,
            "methods": list(self.methods), "k": self.k, "seed": self.seed, "out": self.out,
            "sigma_source": self.sigma_source, "raw_sigma_scale": self.raw_sigma_scale,
            "isotonic_folds": self.isotonic_folds,
            "allow_unconverged": self.allow_unconverged, "min_group_size": self.min_group_size,
        }

    def fingerprint(self):
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, overrides):
        """Return a copy with dotted-path overrides, e.g. ``{"bayes.draws": 500}``."""
        d = self.to_dict()
        for path, value in overrides.items():
            keys = path.split(".")
            node = d
            for key in keys[:-1]:
                if not isinstance(node.get(key), dict):
                    raise ConfigError(f"cannot override {path!r}: {key!r} is not a section")
                node = node[key]
            if keys[-1] not in node and not (len(keys) > 1 and keys[0] in (
                    "bayes", "hierarchy", "data")):
                raise ConfigError(f"unknown config key {path!r}")
            node[keys[-1]] = value
        return ExperimentConfig.from_dict(d)


def parse_override(text):
    """``"key.path=value"`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {text!r}: {exc}") from None
    return key.strip(), value


# --------------------------------------------------------------------------
# One fold
# --------------------------------------------------------------------------


def _seed(master, fold, component):
    ss = np.random.SeedSequence(entropy=int(master) & (2**64 - 1), spawn_key=(fold, component))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class FoldResult:
    """Outputs of one fold; ``intervals`` holds per-test-row columns."""

    index: int
    split_fingerprint: str
    n_train: int
    n_calib: int
    n_test: int
    convergence: dict | None = None
    calibrations: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    uncertainty: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def failed(self):
        return self.error is not None

    @property
    def converged(self):
        return self.convergence is None or bool(self.convergence["passed"])

    def to_dict(self):
        return {
            "index": self.index, "split_fingerprint": self.split_fingerprint,
            "n_train": self.n_train, "n_calib": self.n_calib, "n_test": self.n_test,
            "error": self.error, "convergence": self.convergence,
            "calibrations": self.calibrations,
            "metrics": {m: {_akey(a): r.to_dict() for a, r in per.items()}
                        for m, per in self.metrics.items()},
            "uncertainty": self.uncertainty,
        }


def _akey(alpha):
    return f"{alpha:g}"


@dataclass
class FoldModels:
    """Fitted objects of a fold, kept for inspection and leakage checks."""

    preprocess: object
    hrf: object
    samples: object
    isotonic: object


def crossfit_residuals(train: HierarchicalDataset, spec: HierarchySpec, folds, seed):
    """Out-of-fold ``y - f_hat`` on the training rows.

    The in-sample forest fit is far tighter than its error on new rows, so
    the isotonic sigma map is fitted to residuals of forests that did not
    see the row.
    """
    n = len(train)
    fold_of = np.random.default_rng(seed).permutation(n) % folds
    resid = np.empty(n)
    for j in range(folds):
        held = np.flatnonzero(fold_of == j)
        model = fit_hrf(train.subset(np.flatnonzero(fold_of != j)), spec, seed=seed + j + 1)
        resid[held] = train.y[held] - predict_hrf(model, train.subset(held))
    return resid


def run_fold(config: ExperimentConfig, data: HierarchicalDataset, split: SplitPlan,
             fold_index=0, return_models=False):
    """Fit on the training rows, calibrate on the calibration rows, test on the rest."""
    split.validate(len(data))
    result = FoldResult(fold_index, split.fingerprint(), split.train.size, split.calib.size,
                        split.test.size)
    train, calib, test = (data.subset(split.train), data.subset(split.calib),
                          data.subset(split.test))
    plan = fit_preprocess(train)
    train, calib, test = (apply_preprocess(plan, d) for d in (train, calib, test))

    hrf = fit_hrf(train, config.hierarchy, seed=_seed(config.seed, fold_index, 0))
    f_train, f_cal, f_test = (predict_hrf(hrf, d) for d in (train, calib, test))

    need_bayes = "bayesian" in config.methods or "hybrid" in config.methods
    samples = iso = None
    sigma_raw_test = sigma_cal_test = None
    if need_bayes:
        spec = replace(config.bayes, seed=_seed(config.seed, fold_index, 1))
        samples, report = fit_bayes(f_train, train.hospital, train.region, train.y, spec)
        result.convergence = report.to_dict()
        _, sd_train = posterior_predictive(samples, f_train, train.hospital, train.region)
        _, sd_cal = posterior_predictive(samples, f_cal, calib.hospital, calib.region)
        mean_b_test, sd_test = posterior_predictive(samples, f_test, test.hospital,
                                                    test.region)
        sigma_raw_cal = sd_cal * config.raw_sigma_scale
        sigma_raw_test = sd_test * config.raw_sigma_scale
        oof = crossfit_residuals(train, config.hierarchy, config.isotonic_folds,
                                 _seed(config.seed, fold_index, 3))
        iso = fit_isotonic(sd_train * config.raw_sigma_scale, np.abs(oof))
        sigma_cal_cal = apply_isotonic(iso, sigma_raw_cal)
        sigma_cal_test = apply_isotonic(iso, sigma_raw_test)
        resid = test.y - f_test
        result.uncertainty = {
            "raw": uncertainty_quality(sigma_raw_test, resid).to_dict(),
            "calibrated": uncertainty_quality(sigma_cal_test, resid).to_dict(),
        }
        if config.sigma_source == "calibrated":
            w_cal, w_test = sigma_cal_cal, sigma_cal_test
        else:
            w_cal, w_test = sigma_raw_cal, sigma_raw_test
    # quintiles and CRPS use calibrated sigma; without a Bayesian fit every
    # row gets the same scale (the calibration residual SD)
    if sigma_cal_test is None:
        sigma_eval = np.full(test.y.size, max(float(np.std(calib.y - f_cal)), 1e-12))
    else:
        sigma_eval = np.maximum(sigma_cal_test, 1e-12)

    cal_seed = _seed(config.seed, fold_index, 2)
    prov = {"split": result.split_fingerprint, "fold": fold_index}
    result.intervals = {"row": split.test.copy(), "y": test.y, "y_hrf": f_test,
                        "sigma_cal": sigma_eval}
    if sigma_raw_test is not None:
        result.intervals["sigma_raw"] = sigma_raw_test
    y_c, f_c, h_c = calib.y, f_cal, calib.hospital
    hospitals = np.unique(h_c)
    for method in config.methods:
        result.metrics[method] = {}
        result.calibrations[method] = {}
        for alpha in config.alphas:
            if method == "conformal":
                cal = calibrate(conformity_scores(y_c, f_c), h_c,
                                config.strategy, alpha, cal_seed, hospitals=hospitals,
                                provenance=prov)
                iv = predict_interval(cal, f_test)
                center = f_test
            elif method == "hybrid":
                scores = weighted_scores(y_c, f_c, w_cal, config.gamma,
                                         config.epsilon)
                cal = calibrate(scores, h_c, config.strategy, alpha, cal_seed,
                                gamma=config.gamma, epsilon=config.epsilon,
                                hospitals=hospitals, provenance=prov)
                iv = predict_interval(cal, f_test, w_test)
                center = f_test
            else:
                cal = None
                z = float(special.ndtri(1 - alpha / 2))
                center = mean_b_test
                lower, upper = center - z * sigma_raw_test, center + z * sigma_raw_test
            if cal is not None:
                result.calibrations[method][_akey(alpha)] = cal.to_dict()
                lower, upper = iv.lower, iv.upper
            result.metrics[method][alpha] = evaluate(test.y, center, lower, upper, sigma_eval,
                                                     alpha, crps_sigma=sigma_eval)
            result.intervals[f"{method}|{_akey(alpha)}"] = (center, lower, upper)
    if return_models:
        return result, FoldModels(plan, hrf, samples, iso)
    return result


# --------------------------------------------------------------------------
# Whole experiment
# --------------------------------------------------------------------------


@dataclass
class RunReport:
    config: ExperimentConfig
    folds: list
    dataset: dict
    group_columns: dict = field(default_factory=dict)

    @property
    def converged(self):
        return all(f.converged for f in self.folds if not f.failed)

    @property
    def gate_passed(self):
        return self.converged or self.config.allow_unconverged

    @property
    def ok_folds(self):
        return [f for f in self.folds if not f.failed]

    def aggregate(self):
        """Mean and SD (ddof=1) across successful folds of each scalar metric."""
        out = {}
        folds = self.ok_folds
        for method in self.config.methods:
            out[method] = {}
            for alpha in self.config.alphas:
                reports = [f.metrics[method][alpha] for f in folds]
                if not reports:
                    continue
                agg = {}
                for name in MetricReport.SCALARS[2:]:
                    agg[name] = _mean_sd([getattr(r, name) for r in reports])
                for name in ("quintile_coverage", "quintile_width"):
                    cols = np.array([getattr(r, name) for r in reports], dtype=float)
                    agg[name] = [_mean_sd(cols[:, j]) for j in range(cols.shape[1])]
                out[method][_akey(alpha)] = agg
        return out

    def to_dict(self, include_metrics=True):
        d = {"format": FORMAT_TAG, "config": self.config.to_dict(), "dataset": self.dataset,
             "converged": self.converged, "gate_passed": self.gate_passed,
             "status": "ok" if self.gate_passed else "convergence_gate_failed",
             "failed_folds": [f.index for f in self.folds if f.failed]}
        folds = [f.to_dict() for f in self.folds]
        if include_metrics:
            d["aggregate"] = self.aggregate()
        else:
            for f in folds:
                f.pop("metrics")
                f.pop("calibrations")
                f.pop("uncertainty")
        d["folds"] = folds
        return d

    def to_json(self, include_metrics=True):
        return json.dumps(_nan_to_none(self.to_dict(include_metrics)), sort_keys=True,
                          indent=2) + "\n"

    def metrics_rows(self):
        header = ["fold", "method"] + MetricReport.csv_header()
        rows = []
        for f in self.ok_folds:
            for method in self.config.methods:
                for alpha in self.config.alphas:
                    rows.append([f.index, method] + f.metrics[method][alpha].csv_row())
        return header, rows

    def interval_table(self):
        """Long-format per-test-row table over folds, methods and alphas."""
        groups = list(self.group_columns)
        cols = {k: [] for k in ("fold", "method", "alpha", "row", *groups, "y", "center",
                                "lower", "upper", "sigma_raw", "sigma_cal")}
        for f in self.ok_folds:
            iv = f.intervals
            rows = iv["row"]
            for method in self.config.methods:
                for alpha in self.config.alphas:
                    center, lower, upper = iv[f"{method}|{_akey(alpha)}"]
                    n = rows.size
                    cols["fold"].extend([f.index] * n)
                    cols["method"].extend([method] * n)
                    cols["alpha"].extend([alpha] * n)
                    cols["row"].extend(rows.tolist())
                    for name in groups:
                        cols[name].extend(self.group_columns[name][rows].tolist())
                    cols["y"].extend(iv["y"].tolist())
                    cols["center"].extend(np.asarray(center).tolist())
                    cols["lower"].extend(np.asarray(lower).tolist())
                    cols["upper"].extend(np.asarray(upper).tolist())
                    cols["sigma_raw"].extend(iv.get("sigma_raw", np.full(n, np.nan)).tolist())
                    cols["sigma_cal"].extend(iv["sigma_cal"].tolist())
        return IntervalTable({k: np.asarray(v) for k, v in cols.items()})


def _mean_sd(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": float("nan"), "sd": float("nan")}
    return {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0}


def dataset_summary(data: HierarchicalDataset):
    d = {"n": len(data), "n_features": data.n_features, "hospitals": int(data.hospitals.size),
         "regions": int(data.regions.size), "mean_outcome": float(data.y.mean())}
    try:
        icc = icc_decomposition(data)
        d["icc"] = {"patient": icc.patient, "hospital": icc.hospital, "region": icc.region,
                    "total_variance": icc.total_variance}
    except DecompositionError as exc:
        d["icc"] = {"error": str(exc)}
    return d


def run_experiment(config: ExperimentConfig, data: HierarchicalDataset | None = None):
    """Run every fold; folds that raise are recorded and skipped."""
    data = data if data is not None else config.data.load()
    plans = stratified_kfold(data, k=config.k, seed=config.seed)
    folds = []
    for i, plan in enumerate(plans):
        try:
            folds.append(run_fold(config, data, plan, i))
        except (HierConformalError, np.linalg.LinAlgError) as exc:
            folds.append(FoldResult(i, plan.fingerprint(), plan.train.size, plan.calib.size,
                                    plan.test.size, error=f"{type(exc).__name__}: {exc}"))
    groups = {name: data.group_values(name)
              for name in ("hospital", "region", *sorted(data.hospital_attributes))}
    return RunReport(config, folds, dataset_summary(data), groups)


# --------------------------------------------------------------------------
# Interval tables and subgroup reports
# --------------------------------------------------------------------------


class IntervalTable:
    """Column store of per-row intervals (the content of ``intervals.csv``)."""

    NUMERIC = {"fold": int, "alpha": float, "row": int, "y": float, "center": float,
               "lower": float, "upper": float, "sigma_raw": float, "sigma_cal": float}

    def __init__(self, columns):
        self.columns = columns

    def __len__(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def write(self, path_or_buf):
        names = list(self.columns)
        own = isinstance(path_or_buf, (str, Path))
        fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            cols = [self.columns[n] for n in names]
            for i in range(len(self)):
                w.writerow([_fmt(c[i]) for c in cols])
        finally:
            if own:
                fh.close()

    @classmethod
    def read(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                names = next(reader)
            except StopIteration:
                raise DataError(f"{path} is empty") from None
            rows = list(reader)
        cols = {}
        for j, name in enumerate(names):
            raw = [r[j] for r in rows]
            conv = cls.NUMERIC.get(name)
            cols[name] = np.array([conv(v) for v in raw]) if conv else np.array(raw, dtype=str)
        return cls(cols)

    def select(self, method, alpha):
        m = (self.columns["method"] == method) & np.isclose(self.columns["alpha"], alpha)
        if not m.any():
            raise ConfigError(f"no intervals for method={method!r}, alpha={alpha}")
        return IntervalTable({k: v[m] for k, v in self.columns.items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


@dataclass(frozen=True)
class SubgroupRow:
    group: str
    n: int
    coverage: float
    mean_width: float
    small: bool


def subgroup_report(table: IntervalTable, attribute, method="hybrid", alpha=0.05,
                    min_size=30):
    """Coverage and mean width per value of ``attribute`` on pooled test rows."""
    sel = table.select(method, alpha)
    if attribute not in sel.columns or attribute in IntervalTable.NUMERIC:
        known = [k for k in sel.columns if k not in IntervalTable.NUMERIC and k != "method"]
        raise ConfigError(f"unknown grouping attribute {attribute!r}; known: {known}")
    c = sel.columns
    hit = (c["lower"] <= c["y"]) & (c["y"] <= c["upper"])
    width = c["upper"] - c["lower"]
    rows = []
    for g in sorted(set(c[attribute].tolist())):
        m = c[attribute] == g
        n = int(m.sum())
        rows.append(SubgroupRow(g, n, float(hit[m].mean()), float(width[m].mean()),
                                n < min_size))
    return rows


# --------------------------------------------------------------------------
# Artifacts
# --------------------------------------------------------------------------


def provenance(config: ExperimentConfig, report: RunReport):
    return {
        "format": FORMAT_TAG, "package_version": __version__,
        "config_fingerprint": config.fingerprint(), "master_seed": config.seed,
        "fold_seeds": {str(f.index): {"hrf": _seed(config.seed, f.index, 0),
                                      "bayes": _seed(config.seed, f.index, 1),
                                      "conformal": _seed(config.seed, f.index, 2),
                                      "isotonic": _seed(config.seed, f.index, 3)}
                       for f in report.folds},
        "split_fingerprints": {str(f.index): f.split_fingerprint for f in report.folds},
        "python": platform.python_version(), "numpy": np.__version__,
    }


def write_artifacts(report: RunReport, out_dir):
    """Write report.json, provenance.json and (gate permitting) metrics.csv and intervals.csv.

    Raises :class:`ConvergenceGateError` after writing the withheld report
    when the convergence gate fails without an override.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gate = report.gate_passed
    (out / "report.json").write_text(report.to_json(include_metrics=gate), encoding="utf-8")
    (out / "provenance.json").write_text(
        json.dumps(provenance(report.config, report), sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    if not gate:
        for name in ("metrics.csv", "intervals.csv"):
            (out / name).unlink(missing_ok=True)
        bad = [f.index for f in report.ok_folds if not f.converged]
        raise ConvergenceGateError(
            f"MCMC diagnostics failed in folds {bad}; metrics withheld "
            "(set allow_unconverged to override)")
    header, rows = report.metrics_rows()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if not (isinstance(v, float) and math.isnan(v)) else "" for v in r])
    (out / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")
    report.interval_table().write(out / "intervals.csv")
    return out


def load_report(in_dir):
    path = Path(in_dir) / "report.json"
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if d.get("format") != FORMAT_TAG:
        raise DataError(f"{path} is not a run report")
    return d


def summary_rows(report_dict):
    """Flat (method, alpha, metric, mean, sd) rows from a saved report."""
    rows = []
    for method, per in sorted(report_dict.get("aggregate", {}).items()):
        for alpha, metrics in sorted(per.items(), key=lambda kv: float(kv[0])):
            for name, v in metrics.items():
                if isinstance(v, dict):
                    rows.append((method, alpha, name, v["mean"], v["sd"]))
                else:
                    for j, q in enumerate(v):
                        rows.append((method, alpha, f"{name}[q{j + 1}]", q["mean"], q["sd"]))
    return rows


def sweep(config: ExperimentConfig, param, values, data=None):
    """Run one experiment per value of ``param`` (``alpha`` sets a single alpha)."""
    data = data if data is not None else config.data.load()
    results = []
    for v in values:
        cfg = (config.with_overrides({"alphas": [v]}) if param == "alpha"
               else config.with_overrides({param: v}))
        src_changed = param.startswith("data.")
        results.append((v, run_experiment(cfg, None if src_changed else data)))
    return results


def to_plain(obj):
    """Dataclass or mapping to JSON-ready builtins."""
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return obj
