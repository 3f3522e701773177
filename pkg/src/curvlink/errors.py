"""Exception hierarchy shared by all modules."""


class CurvlinkError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(CurvlinkError, ValueError):
    """Invalid settings, configuration file or argument."""


class NumericError(CurvlinkError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    Carries the epoch and batch index at which the divergence was detected.
    """

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class NotFoundError(CurvlinkError, KeyError):
    """A requested sample id (or other key) does not exist."""


class CalibrationError(ConfigurationError):
    """Noise multiplier could not be calibrated to the requested budget."""

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class InsufficientModelsError(CurvlinkError):
    """An ensemble subset needed for an estimate is empty or too small."""

    def __init__(self, message, counts=None):
        super().__init__(message)
        self.counts = counts


class FitError(NumericError):
    """A curve fit failed to converge from every start."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnsupportedDatasetError(ConfigurationError):
    """The dataset lacks information an estimator needs (e.g. Bayes risk)."""
