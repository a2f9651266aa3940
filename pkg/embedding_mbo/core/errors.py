class DropError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ConfigError(DropError):
    """Invalid configuration file, key or value."""

    exit_code = 2


class UnregisteredEnvError(ConfigError):
    """The environment has no normalization references."""


class DataError(DropError):
    """Problems with offline data or environment data."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class SchemaError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class EmptyInputError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateRangeError(DataError):
    pass


class EmptySubTaskError(DataError):
    pass


class EnvironmentFault(DataError):
    """An environment refused a step. `partial` holds whatever was recorded."""

    def __init__(self, message: str, partial=None):
        self.partial = partial
        super().__init__(message)


class NumericalError(DropError):
    exit_code = 4

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        suffix = f" (layer {layer})" if layer is not None else ""
        super().__init__(f"{message}{suffix}")


class ShapeError(DropError, ValueError):
    pass


class DomainError(DropError, ValueError):
    pass


class SubTaskIndexError(DropError, IndexError):
    pass
