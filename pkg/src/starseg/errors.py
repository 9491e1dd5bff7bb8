"""Exception types shared across the package."""


class StarsegError(Exception):
    """Base class for all starseg errors."""


class DimensionError(StarsegError, ValueError):
    """Raster shapes or sizes violate an operation's contract."""


class ConfigError(StarsegError, ValueError):
    """A configuration object or argument set is invalid."""


class EmptyDatasetError(StarsegError, ValueError):
    """An operation that needs at least one sample received none."""


class MaskValueError(StarsegError, ValueError):
    """A mask file or array contains values other than the two legal labels."""


class GeometryMismatchError(StarsegError, ValueError):
    """A star geometry was paired with a mask it was not built from."""


class DivergenceError(StarsegError, RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(StarsegError, ValueError):
    """A checkpoint file is malformed or holds unstorable tensors."""
