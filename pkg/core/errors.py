"""Exception hierarchy shared by every module. Each class carries its CLI exit code."""
from typing import Optional


class CsiToolkitError(Exception):
    exit_code: int = 1


class ConfigError(CsiToolkitError, ValueError):
    exit_code = 2


class DataFormatError(CsiToolkitError):
    """Raised when a CSIBIN / CKPT1 / BITS1 payload cannot be parsed."""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DecodeError(DataFormatError):
    pass


class PriorMismatchError(DataFormatError):
    pass


class DivergenceError(CsiToolkitError):
    exit_code = 4

    def __init__(self, message: str, epoch: int = -1, last_finite_loss: Optional[float] = None):
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"{message} (epoch {epoch}, last finite loss {last_finite_loss})"
        )


class DimensionError(CsiToolkitError, ValueError):
    exit_code = 2


class TapeError(CsiToolkitError, RuntimeError):
    pass


class ContractViolation(CsiToolkitError, ValueError):
    pass


class NumericalError(CsiToolkitError, ArithmeticError):
    """A NaN or Inf appeared inside a recorded computation."""

    exit_code = 4

    def __init__(self, message: str, op: str = ""):
        self.op = op
        super().__init__(message)
