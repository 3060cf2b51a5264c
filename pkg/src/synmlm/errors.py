"""Exception types shared across the package.

The CLI maps these onto exit codes, so new error conditions should reuse
one of the classes below instead of raising bare builtins.
"""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class NotFoundError(LookupError):
    """A requested item (feature, artifact, file) does not exist."""


class GenerationError(RuntimeError):
    """Dataset generation could not satisfy its constraints (e.g. balance)."""


class NumericalError(ArithmeticError):
    """A numeric result left the finite range (NaN/Inf) or diverged."""


class InvalidStateError(RuntimeError):
    """An object was used in a way its lifecycle forbids (e.g. double backward)."""


class UndefinedCorrelationError(ArithmeticError):
    """Pearson correlation requested on data with zero variance."""


class ValidationError(ValueError):
    """A manifest or config failed validation; carries the offending fields."""

    def __init__(self, message: str, fields: list[str] | None = None):
        super().__init__(message)
        self.fields = fields or []
