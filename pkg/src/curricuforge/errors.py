"""Exception hierarchy. Each family maps onto one CLI exit code."""


class CurricuForgeError(Exception):
    exit_code = 2


class ConfigError(CurricuForgeError, ValueError):
    """Invalid configuration value (exit code 1)."""

    exit_code = 1


class DataError(CurricuForgeError, ValueError):
    exit_code = 2


class ValidationError(DataError):
    """A box, parameter vector or sample failed its invariants."""


class GeometryError(DataError):
    """Degenerate geometry (e.g. GIoU between two zero-area boxes)."""


class IngestionError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CoverageError(DataError, KeyError):
    """An external score table was queried for an id it does not hold."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UnsupportedOperation(DataError):
    pass


class TrainingError(CurricuForgeError, ArithmeticError):
    """Non-finite loss during training (exit code 3)."""

    exit_code = 3

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
