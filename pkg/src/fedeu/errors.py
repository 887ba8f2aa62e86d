"""Exception hierarchy shared across the package."""


class FedEUError(Exception):
    """Base class for every error raised by fedeu."""


class ShapeError(FedEUError, ValueError):
    pass


class NumericError(FedEUError, ArithmeticError):
    """A forward value or loss became NaN/Inf."""


class ContractError(FedEUError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class TapeConsumedError(ContractError):
    pass


class DomainError(FedEUError, ValueError):
    pass


class LabelError(FedEUError, ValueError):
    pass


class ConfigError(FedEUError, ValueError):
    pass


class ProtocolError(FedEUError, RuntimeError):
    """Client uploads do not match the server's parameter schema."""


class FormatError(FedEUError, ValueError):
    """A binary container is malformed; ``offset`` is the failing byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
