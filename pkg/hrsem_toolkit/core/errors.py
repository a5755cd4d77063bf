"""Error hierarchy shared by the pipeline; each class carries its CLI exit code"""


class HRSemError(Exception):
    exit_code = 1


class ConfigError(HRSemError):
    exit_code = 2


class DataError(HRSemError):
    exit_code = 3


class FormatError(DataError, ValueError):
    pass


class CorruptionError(DataError, ValueError):
    pass


class ShapeError(DataError, ValueError):
    pass


class PreconditionError(DataError, ValueError):
    pass


class ManifestError(DataError):
    pass


class GenerationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(HRSemError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, term: str = None, iteration: int = None):
        super().__init__(message)
        self.term = term
        self.iteration = iteration
