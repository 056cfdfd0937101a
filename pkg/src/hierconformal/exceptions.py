"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`HierConformalError`, so callers (and the CLI) can map failures to
exit codes without catching unrelated exceptions.
"""


class HierConformalError(Exception):
    """Base class for all package errors."""


class ConfigError(HierConformalError, ValueError):
    """Invalid configuration or hyperparameters."""


class DataError(HierConformalError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """A CSV file could not be parsed.

    Parameters
    ----------
    message : str
    row : int or None
        1-based line number in the file (header is line 1).
    """

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"line {row}: {message}"
        super().__init__(message)


class NestingError(DataError):
    """A hospital appears under more than one region."""


class StratificationError(DataError):
    """Too few rows per outcome stratum for the requested fold count."""


class DecompositionError(DataError):
    """Variance decomposition impossible on the given grouping."""


class FitError(HierConformalError, RuntimeError):
    """A model could not be fitted."""


class PredictError(HierConformalError, ValueError):
    """Prediction inputs do not match the fitted model."""


class CalibrationError(HierConformalError, ValueError):
    """Conformal calibration preconditions violated."""


class InputError(HierConformalError, ValueError):
    """Invalid argument to a numerical routine."""


class UndefinedMetricError(HierConformalError, ValueError):
    """A metric is undefined on the given inputs (e.g. zero variance)."""


class ConvergenceGateError(HierConformalError, RuntimeError):
    """MCMC diagnostics failed and no override was given."""
