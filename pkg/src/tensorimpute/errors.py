"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/schema
problems exit 2, solver breakdowns exit 3.
"""


class TensorImputeError(Exception):
    """Base class for all package errors."""


class DimensionError(TensorImputeError, ValueError):
    """Shapes or lengths of operands do not line up."""


class ParameterError(TensorImputeError, ValueError):
    """A scalar parameter is outside its valid range."""


class ValidationError(TensorImputeError, ValueError):
    """User-supplied data fails a structural check (e.g. asymmetric matrix)."""


class ConfigError(TensorImputeError, ValueError):
    """Run configuration violates the schema or an internal invariant."""


class DataFormatError(TensorImputeError, ValueError):
    """A file on disk is malformed or inconsistent."""


class FactorizationError(TensorImputeError, RuntimeError):
    """A matrix could not be factorized even after jitter escalation."""


class SolverError(TensorImputeError, RuntimeError):
    """Iterative solver failures exceeded the tolerated budget."""
