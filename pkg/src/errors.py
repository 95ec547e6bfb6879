"""
Exception hierarchy for the LegoFormer desk-scale pipeline.

Library code raises these; only the command-line layer turns them into exit codes.
"""


class LegoFormerError(Exception):
    """Base class for every error raised by the package"""

    exit_code = 1


class ConfigError(LegoFormerError):
    """Invalid configuration value or command-line argument"""

    exit_code = 2


class DataIOError(LegoFormerError):
    """A file could not be read, written or parsed"""

    exit_code = 3

    def __init__(self, message: str, path=None):
        self.path = str(path) if path is not None else None
        if self.path and self.path not in message:
            message = f"{message}: {self.path}"
        super().__init__(message)


class NumericalAbort(LegoFormerError):
    """Training produced a non-finite loss"""

    exit_code = 4

    def __init__(self, step: int, lr: float, loss: float):
        self.step = step
        self.lr = lr
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.6g})")


class ShapeMismatchError(LegoFormerError, ValueError):
    """Operand shapes are incompatible"""

    exit_code = 2

    def __init__(self, op: str, a, b):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class RangeError(LegoFormerError, ValueError):
    """A value lies outside its admissible range"""

    exit_code = 2
