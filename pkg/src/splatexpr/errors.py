"""Exception hierarchy shared by all modules."""


class SplatExprError(Exception):
    """Base class for every error raised by this package."""


class MeshError(SplatExprError):
    pass


class ObjParseError(MeshError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class PlyError(SplatExprError):
    pass


class ShapeMismatchError(SplatExprError, ValueError):
    pass


class ConfigError(SplatExprError):
    pass


class NumericError(SplatExprError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


class CheckpointError(SplatExprError):
    pass
