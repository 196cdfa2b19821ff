"""Exception types shared across the package.

The command-line interface maps these onto exit codes: invalid input -> 2,
numerical failure -> 3, configuration problems -> 4.
"""


class PlnGraphError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PlnGraphError):
    """Input data or parameters violate a documented precondition."""


class UninformativeVariableError(InvalidInputError):
    """A variable carries no usable information (e.g. an all-zero column)."""


class NumericalFailureError(PlnGraphError):
    """An iterative numerical routine failed to converge within its budget."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = dict(context or {})


class GridResolutionError(NumericalFailureError):
    """A quadrature grid is too coarse for the requested accuracy."""


class ConfigError(PlnGraphError):
    """A pipeline or CLI configuration is inconsistent or incomplete."""
