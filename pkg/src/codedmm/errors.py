"""Exception types shared across the package."""


class CodedMMError(Exception):
    """Base class for every error raised by codedmm."""


class InvalidArgument(CodedMMError, ValueError):
    pass


class NotDecodable(CodedMMError):
    """Raised when straggling cells cannot be recovered from what arrived."""

    def __init__(self, message, cells=()):
        super().__init__(message)
        self.cells = list(cells)


class MissingKey(CodedMMError, KeyError):
    def __str__(self):
        return f"no blob stored under key {self.args[0]!r}"


class TooLarge(CodedMMError):
    pass


class DegenerateInput(CodedMMError, ValueError):
    pass


class NotPositiveDefinite(CodedMMError, ArithmeticError):
    pass


class SingularPreconditioner(CodedMMError, ArithmeticError):
    pass


class RankZero(CodedMMError, ValueError):
    pass
