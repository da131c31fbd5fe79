"""Exception types shared across the package."""


class ULiteError(Exception):
    """Base class for package-specific failures."""


class ShapeError(ULiteError, ValueError):
    """Array dims violate an operation's shape contract."""


class UnsupportedKernelError(ULiteError, ValueError):
    """Kernel geometry outside the supported set (odd 1xk, kx1, kxk)."""


class InvalidInputError(ULiteError, ValueError):
    """Input values violate a domain contract (e.g. a non-binary mask)."""


class NonFiniteError(ULiteError, FloatingPointError):
    """An operation produced NaN or Inf.

    ``op`` names the first offending operation, qualified by the enclosing
    scope stack so the failing layer can be identified from the message.
    """

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by {op}"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class ConfigError(ULiteError, ValueError):
    """Malformed configuration file or invalid configuration value."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(ULiteError, RuntimeError):
    """Unreadable, truncated, or inconsistent checkpoint file."""


class DataError(ULiteError, ValueError):
    """Dataset file missing, undecodable, or inconsistent with its manifest."""


class TrainingAborted(ULiteError, RuntimeError):
    """Training stopped early because the model produced non-finite values."""
