"""Exception hierarchy shared across the package."""


class CTCGANError(Exception):
    """Base class for every error raised by ctcgan."""


class VolumeFormatError(CTCGANError, ValueError):
    """A CTV1 file or Volume violates the format contract."""


class BadMagicError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


class NonFiniteVoxelError(VolumeFormatError):
    pass


class InvalidParamsError(CTCGANError, ValueError):
    pass


class GridMismatchError(CTCGANError, ValueError):
    pass


class ShapeMismatchError(CTCGANError, ValueError):
    pass


class ConfigError(CTCGANError, ValueError):
    pass


class CheckpointError(CTCGANError):
    pass
