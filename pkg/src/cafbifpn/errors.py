from typing import Optional


class CAFBiFPNError(Exception):
    """Base class for every error raised by cafbifpn."""


class ShapeError(CAFBiFPNError, ValueError):
    pass


class PartitionError(ShapeError):
    pass


class ConfigError(CAFBiFPNError, ValueError):
    pass


class NumericError(CAFBiFPNError, ArithmeticError):
    pass


class GraphError(CAFBiFPNError, RuntimeError):
    pass


class PipelineError(CAFBiFPNError, RuntimeError):
    def __init__(self, node: str, message: str) -> None:
        super().__init__(f"{node}: {message}")
        self.node = node


class FormatError(CAFBiFPNError, ValueError):
    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
