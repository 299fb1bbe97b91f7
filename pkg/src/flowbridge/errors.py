"""Exception types shared across the package."""


class FlowBridgeError(Exception):
    """Base class for all package errors."""


class DomainError(FlowBridgeError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateFrameError(FlowBridgeError, ValueError):
    """Three reference points are coincident or collinear."""


class DimensionError(FlowBridgeError, ValueError):
    """Array shapes do not agree."""


class IntegrationDivergedError(FlowBridgeError, FloatingPointError):
    """ODE/bridge integration produced non-finite state."""


class ConfigError(FlowBridgeError, ValueError):
    """Invalid configuration or input file."""


class TrainingDivergedError(FlowBridgeError, FloatingPointError):
    """Training loss exceeded the divergence threshold."""

    def __init__(self, message, step=None, loss=None):
        super().__init__(message)
        self.step = step
        self.loss = loss


class CheckpointMismatchError(FlowBridgeError, ValueError):
    """A checkpoint does not fit the requested architecture or data."""


class GraphNotRecordedError(FlowBridgeError, RuntimeError):
    """Backward was requested on a value that carries no computation graph."""
