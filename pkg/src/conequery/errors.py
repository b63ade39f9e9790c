"""Exception hierarchy shared across the package."""


class ConeQueryError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class InvalidAngleError(ConeQueryError, ValueError):
    pass


class ShapeError(ConeQueryError, ValueError):
    pass


class InvalidEmbeddingError(ConeQueryError, ValueError):
    pass


class ConfigError(ConeQueryError, ValueError):
    exit_code = 3


class NumericError(ConeQueryError, FloatingPointError):
    """A non-finite value appeared during a forward or backward pass."""

    exit_code = 9

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


class UsageError(ConeQueryError):
    exit_code = 2


class QuerySyntaxError(ConeQueryError, ValueError):
    exit_code = 4

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class LookupFailure(ConeQueryError, KeyError):
    exit_code = 5

    def __str__(self):
        return str(self.args[0]) if self.args else "lookup failure"


class DataFormatError(ConeQueryError):
    exit_code = 6


class SamplingFailure(ConeQueryError):
    exit_code = 7


class GuardError(ConeQueryError):
    """Refusal to run an exponential computation on too large an input."""

    exit_code = 8
