"""Exception hierarchy shared across the package."""


class WiserNetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(WiserNetError, ValueError):
    """Shapes, channel counts or hyperparameters are inconsistent."""


class UsageError(WiserNetError, ValueError):
    """An API was called with arguments outside its contract."""


class UpdateError(WiserNetError, RuntimeError):
    """An optimizer step was requested for a parameter without a gradient."""


class NumericalError(WiserNetError, ArithmeticError):
    """A numerical routine produced an unusable result."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class LoadError(WiserNetError, IOError):
    """A dataset or checkpoint on disk is missing or malformed."""
