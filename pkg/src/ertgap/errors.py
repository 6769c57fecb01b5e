"""Exception hierarchy shared by every stage of the pipeline."""


class ErtgapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ErtgapError):
    """Input violates a documented invariant (schema, ranges, roster)."""


class ParseError(ValidationError):
    """A row or record could not be parsed."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class EmptyInputError(ValidationError):
    pass


class OrientationError(ValidationError):
    pass


class AlignmentError(ValidationError):
    pass


class MissingArtifactError(ValidationError):
    """An upstream stage output needed by a command does not exist."""


class NumericalError(ErtgapError):
    """A numerical procedure failed (non-PD system, divergence, ...)."""


class SeparationError(NumericalError):
    pass


class UndefinedRatioError(NumericalError):
    pass
