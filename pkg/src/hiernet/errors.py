"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes; library code raises them
directly. Plain ``ValueError`` is reserved for programmer-facing
precondition violations (bad argument values).
"""


class EngineError(Exception):
    """Base class for pipeline errors with a machine-parseable code."""

    code = "E_GENERIC"
    exit_code = 1


class ConfigError(EngineError):
    """Malformed or invalid run configuration."""

    code = "E_CONFIG"
    exit_code = 2


class DataError(EngineError):
    """Missing, malformed, or structurally unusable data."""

    code = "E_DATA"
    exit_code = 3


class ShapeError(DataError):
    """Dimension mismatch between data and model."""

    code = "E_SHAPE"


class InsufficientDataError(DataError):
    """Too few samples or recorded points to proceed."""

    code = "E_INSUFFICIENT_DATA"


class NumericError(EngineError):
    """Non-finite values encountered during computation."""

    code = "E_NUMERIC"
    exit_code = 4
