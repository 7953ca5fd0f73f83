"""Exception hierarchy shared across the package."""


class FlowCodecError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowCodecError, ValueError):
    """A configuration value violates an invariant, or a config file is malformed."""


class DataError(FlowCodecError, ValueError):
    """A dataset is empty, unreadable, or shaped wrong."""


class IntegrationError(FlowCodecError, RuntimeError):
    """ODE integration produced a non-finite state.

    Attributes:
        step: index of the Euler step that produced the non-finite value.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class DivergenceError(FlowCodecError, RuntimeError):
    """Training loss blew past the divergence guard."""


class CheckpointError(FlowCodecError, RuntimeError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """File is truncated or not a checkpoint at all."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was produced under an incompatible model configuration."""


class StageDependencyError(FlowCodecError, RuntimeError):
    """An operation needs a checkpoint from an earlier training stage."""


class NotFittedError(FlowCodecError, RuntimeError):
    """Estimator method called before fit()."""
