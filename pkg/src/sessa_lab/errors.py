"""Exception types shared across the package."""


class SessaLabError(Exception):
    """Base class for every error raised by sessa_lab."""


class InputError(SessaLabError, ValueError):
    """Rejected input: non-finite values, wrong shapes, non-stochastic rows."""


class DomainError(SessaLabError, ValueError):
    """A parameter lies outside the domain where an operation is defined."""


class FitDomainError(DomainError):
    """A decay fit was asked to take the log of a non-positive value."""


class CheckFailure(SessaLabError, AssertionError):
    """A numerical theorem check found a violation.

    ``report`` carries the offending lag (or lags) and measured values.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class RegimeError(SessaLabError):
    """Sampled routing left the regime a theorem check requires."""


class CacheError(SessaLabError):
    """A forward cache does not match the parameters or gradient it is used with."""


class ConfigError(SessaLabError, ValueError):
    """Invalid task, model or training configuration."""


class TrainingError(SessaLabError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(SessaLabError):
    """Checkpoint file could not be parsed or failed an integrity check."""
