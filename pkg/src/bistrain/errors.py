"""Exception types raised across the package."""


class BistrainError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BistrainError, ValueError):
    """An argument violates a documented precondition."""


class InvalidSpecError(InvalidInputError):
    """A phantom description is inconsistent (e.g. overlapping inclusions)."""


class InvalidConfigError(InvalidInputError):
    """A solver or experiment configuration cannot be honoured."""


class DegenerateInputError(BistrainError, ValueError):
    """The input admits no meaningful answer (all samples masked, zero variance...)."""


class NumericalError(BistrainError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class GridFormatError(InvalidInputError):
    """An EVGRID / CSV file could not be parsed."""
