"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class DomainError(ValueError):
    """A scalar argument is outside its valid range (grade index, split
    fraction, zero channel std, empty dataset, ...)."""


class ConfigError(ValueError):
    """A layer stack fails validation; the message names the first bad layer."""


class NumericalError(ArithmeticError):
    """An operation produced a non-finite value (NaN or Inf)."""


class IntegrityError(RuntimeError):
    """A forward trace does not belong to the model it is used with."""


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss.  Carries the epoch index."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class CheckpointError(RuntimeError):
    """Base class for malformed checkpoint files."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The file uses an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before all declared data was read."""


class CheckpointFormatError(CheckpointError):
    """The file content is inconsistent (bad descriptor, shape mismatch,
    trailing garbage)."""


class CheckpointChecksumError(CheckpointError):
    """The trailing checksum does not match the file content."""


class ManifestError(ValueError):
    """A dataset manifest is malformed or references missing files."""
