"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message text.
"""


class MetanomError(Exception):
    """Base class for all package errors."""


class ConfigError(MetanomError):
    """Invalid or inconsistent configuration (CLI exit 2)."""


class DataError(MetanomError):
    """Problems with input data: schema, quality, leakage (CLI exit 3)."""


class SchemaError(DataError):
    """Declared columns or families missing from the data."""


class DataQualityError(DataError):
    """Too many rows dropped or values outside the allowed domain."""


class LeakageError(DataError):
    """Rows from a forbidden pool reached a fit or training set."""


class DisjointnessError(DataError):
    """Meta-OOD and held-out family sets overlap, or a family is double-assigned."""


class DimensionError(MetanomError):
    """Matrix shape mismatch in a numeric operation."""


class ParameterError(MetanomError):
    """A numeric argument outside its valid range (temperature, target, epsilon)."""


class NonFiniteError(MetanomError):
    """NaN or Inf appeared in a forward or backward pass (CLI exit 4)."""


class DivergenceError(MetanomError):
    """Training loss exceeded the divergence guard (CLI exit 4)."""


class InvariantViolationError(MetanomError):
    """An internal invariant was broken, e.g. frozen parameters drifted (CLI exit 5)."""
