"""Exception hierarchy shared across the package."""


class MrDebiasError(Exception):
    """Base class for every error raised by this package."""


class ParseError(MrDebiasError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateCellError(MrDebiasError, ValueError):
    pass


class BoundsError(MrDebiasError, IndexError):
    pass


class DomainError(MrDebiasError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class InvalidSplitError(MrDebiasError, ValueError):
    pass


class DegenerateGenerationError(MrDebiasError, ValueError):
    pass


class NumericError(MrDebiasError, FloatingPointError):
    def __init__(self, message, name=None):
        self.name = name
        super().__init__(message)


class MissingMarSampleError(MrDebiasError, ValueError):
    pass


class ContractError(MrDebiasError, ValueError):
    """Inputs violate a documented precondition."""


class SingularSystemError(MrDebiasError, ArithmeticError):
    pass


class OracleUnavailableError(MrDebiasError, ValueError):
    """Ground-truth ratings or propensities are required but absent."""


class UndefinedEstimateError(MrDebiasError, ValueError):
    pass


class UndefinedMetricError(MrDebiasError, ValueError):
    pass


class BoundInapplicableError(MrDebiasError, ValueError):
    def __init__(self, message, cells=()):
        self.cells = list(cells)
        super().__init__(message)


class MonteCarloError(MrDebiasError, RuntimeError):
    def __init__(self, message, failures=()):
        # failures: list of (trial_index, exception)
        self.failures = list(failures)
        super().__init__(message)


class SparseDataError(MrDebiasError, RuntimeError):
    pass


class TrainingDivergedError(MrDebiasError, RuntimeError):
    def __init__(self, message, checkpoint=None, round_index=None):
        self.checkpoint = checkpoint
        self.round_index = round_index
        super().__init__(message)


class ConfigError(MrDebiasError, ValueError):
    pass


class StageError(MrDebiasError, RuntimeError):
    """Wraps a failure inside an experiment pipeline with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
