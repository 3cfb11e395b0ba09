"""Exception hierarchy shared across the package."""


class LSTNError(Exception):
    """Base class for all errors raised by lstn."""


class DimensionError(LSTNError, ValueError):
    pass


class UsageError(LSTNError):
    pass


class ConfigError(LSTNError, ValueError):
    pass


class ParameterError(LSTNError, ValueError):
    pass


class AnnotationError(LSTNError, ValueError):
    """A head annotation lies outside its grid or frame."""


class ParseError(LSTNError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(LSTNError, ValueError):
    pass


class FormatError(LSTNError, ValueError):
    pass


class CheckpointError(LSTNError):
    pass


class NumericalError(LSTNError, FloatingPointError):
    """An operation produced NaN or Inf."""
