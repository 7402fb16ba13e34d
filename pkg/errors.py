"""Exception types shared by the solver, the simulator and the CLI."""


class AoiError(Exception):
    """Base error. `exit_code` is what the CLI returns when it escapes."""

    exit_code = 1


class ConfigError(AoiError, ValueError):
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NumericalError(AoiError, RuntimeError):
    exit_code = 3

    def __init__(self, message, residuals=None):
        self.residuals = list(residuals or [])
        if self.residuals:
            tail = ", ".join(f"{r:.3e}" for r in self.residuals[-5:])
            message = f"{message} (last residuals: {tail})"
        super().__init__(message)


class UnstableError(AoiError):
    """Raised when a prediction is requested outside the stability region."""

    exit_code = 3


class StorageError(AoiError, OSError):
    exit_code = 4
