"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DecoupleQError(Exception):
    exit_code = 1


class ValidationError(DecoupleQError, ValueError):
    """Bad input data or an invalid configuration."""

    exit_code = 1


class FormatError(DecoupleQError, ValueError):
    """A binary file could not be parsed."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SingularSystemError(DecoupleQError, ArithmeticError):
    """A linear system stayed singular after the maximum ridge."""

    exit_code = 3
