"""Exception hierarchy shared by every module."""


class FaultSimError(Exception):
    """Base class for all package errors."""


class GraphError(FaultSimError):
    pass


class HookError(FaultSimError):
    pass


class ConfigError(FaultSimError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ObserverError(FaultSimError):
    pass


class DataError(FaultSimError):
    pass


class LoadError(FaultSimError, OSError):
    """Raised when a model, weights or dataset file cannot be loaded."""


class MagicError(LoadError):
    pass


class VersionError(LoadError):
    pass


class MissingTensorError(LoadError):
    pass


class ShapeMismatchError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass
