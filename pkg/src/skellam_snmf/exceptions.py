"""Package exception types."""


class SkellamSnmfError(Exception):
    """Base class for package-specific failures."""


class NumericalError(SkellamSnmfError):
    """Inference produced a non-finite quantity or an impossible model."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class ConfigError(SkellamSnmfError, ValueError):
    """Inconsistent run configuration or hyperparameter slot layout."""


class CsvParseError(SkellamSnmfError, ValueError):
    """Malformed CSV input; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(SkellamSnmfError, ValueError):
    """JSON artifact does not match the documented schema/version."""
