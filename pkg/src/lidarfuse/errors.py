"""Exception hierarchy shared across the package."""


class LidarFuseError(Exception):
    """Base class for all package errors."""


class ContractError(LidarFuseError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class FormatError(LidarFuseError):
    """A binary or text file does not match its documented layout."""


class ConfigError(LidarFuseError):
    """Configuration or calibration content is invalid."""


class TrainingError(LidarFuseError):
    """Training diverged (non-finite loss or gradient)."""
