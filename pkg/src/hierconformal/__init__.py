"""Hierarchical conformal prediction for clustered regression outcomes."""

__version__ = "0.1.0"

from .bayes import (BayesianCalibrator, BayesModelSpec, ConvergenceReport, PosteriorSamples,
                    convergence_report, fit_bayes, posterior_predictive)
from .conformal import (CalibrationStrategy, ConformalCalibration, ConformalRegressor,
                        PredictionInterval, calibrate, clip_interval, predict_interval)
from .data import (HierarchicalDataset, Schema, SplitPlan, SyntheticConfig, generate_synthetic,
                   icc_decomposition, load_csv, stratified_kfold, write_csv)
from .exceptions import (CalibrationError, ConfigError, ConvergenceGateError, DataError,
                         FitError, HierConformalError, InputError, PredictError)
from .forest import ForestConfig, RandomForest, fit_forest, predict_forest
from .hrf import HierarchicalRandomForest, HierarchySpec, fit_hrf, predict_hrf
from .isotonic import IsotonicCalibrator, IsotonicMap, apply_isotonic, fit_isotonic
from .metrics import MetricReport, evaluate
from .pipeline import ExperimentConfig, RunReport, run_experiment, run_fold, subgroup_report

__all__ = [
    "apply_isotonic", "BayesianCalibrator", "BayesModelSpec", "calibrate",
    "CalibrationError", "CalibrationStrategy", "clip_interval", "ConfigError",
    "ConformalCalibration", "ConformalRegressor", "convergence_report",
    "ConvergenceGateError", "ConvergenceReport", "DataError", "evaluate",
    "ExperimentConfig", "fit_bayes", "fit_forest", "fit_hrf", "fit_isotonic", "FitError",
    "ForestConfig", "generate_synthetic", "HierarchicalDataset", "HierarchicalRandomForest",
    "HierarchySpec", "HierConformalError", "icc_decomposition", "InputError",
    "IsotonicCalibrator", "IsotonicMap", "load_csv", "MetricReport", "posterior_predictive",
    "PosteriorSamples", "predict_forest", "predict_hrf", "predict_interval", "PredictError",
    "PredictionInterval", "RandomForest", "run_experiment", "run_fold", "RunReport",
    "Schema", "SplitPlan", "stratified_kfold", "subgroup_report", "SyntheticConfig",
    "write_csv",
]
