"""Exception types raised across the toolkit."""


class TokprobeError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class ShapeError(TokprobeError, ValueError):
    pass


class UndefinedDistanceError(TokprobeError, ValueError):
    pass


class LoadError(TokprobeError):
    pass


class MalformedHeaderError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class OffsetError(LoadError):
    pass


class UnsupportedDtypeError(LoadError):
    pass


class MissingTensorError(LoadError):
    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"missing required tensor: {name}")


class NameCollisionError(LoadError):
    pass


class VocabError(TokprobeError):
    pass


class CacheError(TokprobeError):
    pass


class CacheVersionError(CacheError):
    pass


class ChecksumError(CacheError):
    pass


class TokenIdError(TokprobeError, IndexError):
    pass


class DatasetError(TokprobeError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CannotPerturbError(TokprobeError):
    pass


class MaskUnavailableError(TokprobeError):
    pass


class CoordinatorFilterError(TokprobeError):
    """Sentence does not contain exactly one clause coordinator."""


class ProbeError(TokprobeError):
    pass


class UndefinedCorrelationError(TokprobeError, ValueError):
    pass


class ConfigError(TokprobeError):
    def __init__(self, errors, config=None):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        self.config = config
        super().__init__("; ".join(self.errors))
