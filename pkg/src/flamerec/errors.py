"""Exception types shared across the package."""


class FlameError(Exception):
    """Base class for errors raised by flamerec."""


class ConfigError(FlameError, ValueError):
    """Invalid configuration or hyperparameter combination."""


class ContractError(FlameError, ValueError):
    """A documented precondition was violated."""


class DataError(FlameError, ValueError):
    """Problems with interaction data (malformed, empty after filtering)."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(FlameError, ValueError):
    """Corrupt or incompatible binary file (checkpoint or dataset cache)."""


class NumericError(FlameError, FloatingPointError):
    """NaN or Inf showed up where finite values are required."""
