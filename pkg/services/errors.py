"""
Structured errors
Every failure the CLI can report carries the exit code it maps to
"""
from os import PathLike
from typing import Optional, Sequence, Tuple, Union


class WindowContextError(Exception):
    """Base class for all errors raised by the engine"""

    exit_code: int = 1


class ConfigError(WindowContextError):
    """Invalid experiment or model configuration"""

    exit_code = 2


class DataError(WindowContextError):
    """Malformed recording, label map or windowing request"""

    exit_code = 3

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[Union[str, PathLike]] = None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}: "
        if line is not None:
            prefix += f"line {line}: "
        super().__init__(f"{prefix}{message}")


class DivergenceError(WindowContextError):
    """Training produced a non-finite loss"""

    exit_code = 4

    def __init__(self, message: str, epoch: Optional[int] = None, fold: Optional[str] = None):
        self.epoch = epoch
        self.fold = fold
        super().__init__(message)


class NumericError(WindowContextError, ValueError):
    """Non-finite primitive input or an invalid differentiation request"""

    exit_code = 4


class ShapeError(WindowContextError, ValueError):
    """Operand shapes do not conform for a primitive"""

    def __init__(self, primitive: str, *shapes: Sequence[int], detail: str = ""):
        self.primitive = primitive
        self.shapes: Tuple[Tuple[int, ...], ...] = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        message = f"{primitive}: shape mismatch {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
