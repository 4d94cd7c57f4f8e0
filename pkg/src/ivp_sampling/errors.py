"""Exception types shared across the package."""


class IvpSamplingError(Exception):
    """Base class for all errors raised by this package."""


class IntegrationDiverged(IvpSamplingError):
    """A rollout produced a non-finite or singular state."""

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class DomainError(IvpSamplingError, ValueError):
    pass


class AlignmentError(IvpSamplingError, ValueError):
    pass


class InsufficientData(IvpSamplingError, ValueError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class SingularFit(IvpSamplingError, ValueError):
    pass


class SingularityError(IvpSamplingError, ValueError):
    """Euler-angle pitch too close to +-pi/2 for the attitude kinematics."""


class ParameterError(IvpSamplingError, ValueError):
    pass


class StationarityError(IvpSamplingError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContinuationFailed(IvpSamplingError):
    def __init__(self, message, step=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


class TrainingDiverged(IvpSamplingError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IterationStarved(IvpSamplingError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(IvpSamplingError, ValueError):
    pass
