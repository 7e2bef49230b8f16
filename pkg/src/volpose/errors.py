"""Exception types raised across the package."""


class VolposeError(Exception):
    """Base class for all package errors."""


class DegenerateDepth(VolposeError, ValueError):
    """A point projects with (near) zero camera-frame depth."""


class EmptyRig(VolposeError, ValueError):
    pass


class ChannelMismatch(VolposeError, ValueError):
    pass


class ShapeMismatch(VolposeError, ValueError):
    pass


class LengthMismatch(VolposeError, ValueError):
    pass


class NonPositiveSigma(VolposeError, ValueError):
    pass


class AllZeroHeatmap(VolposeError, ValueError):
    """Soft-argmax was asked to decode a map with no positive cell."""


class AllZeroWeights(VolposeError, ValueError):
    pass


class NonPSDCovariance(VolposeError, ValueError):
    pass


class WorkspaceOverflow(VolposeError, ValueError):
    """A generated trajectory leaves the voxel workspace."""


class ConfigError(VolposeError):
    """Invalid run configuration. The message names the offending key, flag or file."""
