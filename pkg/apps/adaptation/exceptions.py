"""Иерархия ошибок пайплайна. exit_code используется management-командами."""


class AdaptationError(Exception):
    exit_code = 8


class ConfigError(AdaptationError):
    exit_code = 3


class ConfigSyntaxError(ConfigError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)


class ConfigValidationError(ConfigError):
    def __init__(self, errors):
        self.errors = errors
        details = '; '.join(f'{key}: {" ".join(messages)}' for key, messages in errors.items())
        super().__init__(f'invalid experiment config: {details}')


class MissingInputError(AdaptationError):
    exit_code = 4


class VolumeIOError(AdaptationError):
    exit_code = 5


class NiftiFormatError(VolumeIOError, ValueError):
    pass


class NiftiUnsupportedError(VolumeIOError, ValueError):
    pass


class NiftiTruncatedError(VolumeIOError, ValueError):
    pass


class ManifestError(VolumeIOError, ValueError):
    pass


class DataError(AdaptationError):
    exit_code = 6


class PreconditionError(DataError, ValueError):
    pass


class InvalidVolumeError(DataError, ValueError):
    pass


class PhantomGenerationError(DataError):
    pass


class DimensionMismatchError(DataError, ValueError):
    pass


class ShapeMismatchError(DataError, ValueError):
    pass


class ModelError(AdaptationError):
    exit_code = 7


class ArchitectureError(ModelError, ValueError):
    pass


class IncompatibleModelError(ModelError, ValueError):
    pass


class CheckpointError(ModelError):
    pass


class StageError(AdaptationError):
    exit_code = 8
