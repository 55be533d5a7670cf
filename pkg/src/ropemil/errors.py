"""Exception and warning classes shared across the package.

The CLI maps these onto distinct process exit codes, so new error types
should subclass one of the four categories below.
"""


class RopemilError(Exception):
    """Base class for all package errors."""


class DimensionError(RopemilError, ValueError):
    """Shapes of operands are incompatible."""


class ValidationError(RopemilError, ValueError):
    """Input data violates a structural invariant (duplicates, empty bag, ...)."""


class ConfigurationError(RopemilError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DataFormatError(RopemilError, ValueError):
    """A file on disk does not match the expected format."""


class NumericFailure(RopemilError, RuntimeError):
    """A numeric invariant broke at runtime (NaN loss, NaN gradients, ...)."""


class EmptyAttentionContext(RopemilError, ValueError):
    """Every key position is masked; no attention context exists."""


class EmptyBagError(ValidationError):
    """A bag contains no unmasked instances."""


class DegenerateRowWarning(UserWarning):
    """A softmax row had every position masked and was emitted as zeros."""
