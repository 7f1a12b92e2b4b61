"""Exception types shared across the package."""


class AtlasRegError(Exception):
    """Base class for all package errors."""


class GridMismatchError(AtlasRegError):
    """Two volumes/fields that must share a grid do not."""


class InvalidWindowError(AtlasRegError):
    """Intensity window with lo >= hi."""


class ChannelMismatchError(AtlasRegError):
    """Label volumes with differing channel counts or names."""


class UnknownLabelError(AtlasRegError):
    """A requested label name does not exist. Carries the available names."""

    def __init__(self, requested, available):
        self.requested = requested
        self.available = list(available)
        super().__init__(
            f"unknown label {requested!r}; available: {', '.join(self.available)}"
        )


class NonFiniteLossError(AtlasRegError):
    """Optimization aborted because a loss or gradient went non-finite."""


class PhantomSpecError(AtlasRegError):
    """Invalid phantom specification (e.g. non-invertible deformation)."""


class ConfigError(AtlasRegError):
    """Malformed key-value config file."""


class VolumeFormatError(AtlasRegError):
    """Base class for VVOL1 file format errors. Carries a byte offset."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class BadMagicError(VolumeFormatError):
    """File does not start with the VVOL1 magic string."""


class TruncatedFileError(VolumeFormatError):
    """File ends before the advertised payload."""

    def __init__(self, expected, actual, offset=None):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"truncated file: expected {expected} bytes, found {actual}", offset
        )


class DimOverflowError(VolumeFormatError):
    """Header dims imply an implausibly large payload."""
