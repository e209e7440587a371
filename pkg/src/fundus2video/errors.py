"""Exception types shared across the package."""


class Fundus2VideoError(Exception):
    """Base class for all package errors."""


class ConfigurationError(Fundus2VideoError):
    """Bad or missing configuration, dataset layout or manifest."""


class MalformedSampleError(Fundus2VideoError):
    """A sample (or an image inside it) violates the data contract."""


class InsufficientFramesError(Fundus2VideoError):
    """A phase has fewer frames than the sampler needs."""

    def __init__(self, phase, available, required):
        super().__init__(
            f"phase '{phase}' has {available} frame(s), need at least {required}"
        )
        self.phase = phase
        self.available = available
        self.required = required


class ContractError(Fundus2VideoError, ValueError):
    """Arguments violate a function precondition (shapes, ranges, ...)."""


class TrainingDivergenceError(Fundus2VideoError):
    """A loss became non-finite during training."""

    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown


class CheckpointError(Fundus2VideoError):
    """Checkpoint cannot be read or does not match the architecture."""
