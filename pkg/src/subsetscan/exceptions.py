"""Exception hierarchy shared across the package."""


class SubsetScanError(Exception):
    """Base class for all package errors."""


class ConfigError(SubsetScanError, ValueError):
    """Invalid parameter or configuration value."""


class InvalidAggregateError(SubsetScanError, ValueError):
    """Poisson aggregate (C, B) outside the valid domain."""


class InvalidSubsetError(SubsetScanError, ValueError):
    """Empty or malformed subset passed to a score function."""


class DecompositionError(SubsetScanError, ArithmeticError):
    """A covariance matrix could not be factorized."""


class ConditioningError(DecompositionError):
    """GP Gram matrix still not positive definite after jitter escalation."""


class OptimizationError(SubsetScanError, RuntimeError):
    """All hyperparameter optimizer starts failed.

    The best model seen so far is kept on ``best_model``.
    """

    def __init__(self, message, best_model=None):
        super().__init__(message)
        self.best_model = best_model


class IngestionError(SubsetScanError, ValueError):
    """Malformed input file."""


class CellLookupError(SubsetScanError, IndexError):
    """Cell index outside the tensor grid."""


class ScanError(SubsetScanError, RuntimeError):
    """A scan failed; carries the offending neighborhood or replica."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where
