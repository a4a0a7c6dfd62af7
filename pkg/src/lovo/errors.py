"""Exception types raised by the odometry pipeline."""


class LovoError(Exception):
    """Base class for all package-specific errors."""


class FormatError(LovoError):
    """Input file does not match the expected binary/text layout."""


class ConfigError(LovoError):
    """Configuration file is malformed or contains unknown keys."""


class InvalidLeafError(LovoError):
    """Voxel leaf size is not strictly positive."""


class InvalidSizeError(LovoError):
    """Unit grid cell size is not strictly positive."""


class MaxLevelError(LovoError):
    """Attempted to coarsen a unit grid beyond the top scale level."""


class TooFewPointsError(LovoError):
    """Operation requires more points than the input provides."""


class EmptyTargetError(LovoError):
    """Registration target cloud is empty."""


class EmptyListError(LovoError):
    """Operation requires a nonempty input list."""


class ZeroNormError(LovoError):
    """Weighted quaternion mean cancelled to (near) zero norm."""


class SingularSigmaError(LovoError):
    """A per-point covariance sum was numerically singular."""


class SingularCovarianceError(LovoError):
    """A map-voxel covariance could not be inverted."""


class NumericalError(LovoError):
    """Generic numerical failure surfaced to the CLI (exit code 3)."""
