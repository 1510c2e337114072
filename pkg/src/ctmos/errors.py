"""Exception hierarchy shared across the package."""


class CTMoSError(Exception):
    """Base class for every error raised by ctmos."""

    kind = "error"


class ShapeError(CTMoSError, ValueError):
    kind = "shape"


class ValidationError(CTMoSError, ValueError):
    """Raised when a tensor holds NaN or Inf."""

    kind = "validation"


class ContractError(CTMoSError, RuntimeError):
    kind = "contract"


class ConfigurationError(CTMoSError, ValueError):
    kind = "config"


class TrainingDivergedError(CTMoSError, RuntimeError):
    kind = "diverged"

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class CheckpointError(CTMoSError, IOError):
    kind = "checkpoint"


class CheckpointFormatError(CheckpointError):
    kind = "checkpoint-format"


class CheckpointVersionError(CheckpointError):
    kind = "checkpoint-version"


class CheckpointDigestError(CheckpointError):
    kind = "checkpoint-digest"


class CheckpointTruncatedError(CheckpointError):
    kind = "checkpoint-truncated"
