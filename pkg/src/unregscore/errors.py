"""Exception types shared across the package.

The CLI maps each family onto a stable exit code, so library code raises
these rather than bare ``ValueError``.
"""


class UnregScoreError(Exception):
    """Base class for all package errors."""


class ConfigError(UnregScoreError, ValueError):
    """Bad usage or configuration (CLI exit code 1)."""


class ShapeError(UnregScoreError, ValueError):
    """Tensor or feature dimensions do not match what a model expects."""


class DataError(UnregScoreError):
    """Missing, malformed or insufficient data (CLI exit code 2)."""


class NumericalError(UnregScoreError, ArithmeticError):
    """Non-finite values or divergence (CLI exit code 3)."""


class StaleCacheError(UnregScoreError, RuntimeError):
    """A forward cache was used after its parameters were mutated."""
