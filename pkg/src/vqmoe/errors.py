"""Exception types shared across the package."""


class VqmoeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VqmoeError):
    """Tensor shapes or extents are incompatible with an operation."""


class ConfigError(VqmoeError):
    """A configuration value is out of range or inconsistent."""


class NumericalError(VqmoeError):
    """An operation produced NaN/Inf or otherwise failed numerically."""


class UsageError(VqmoeError):
    """An API was called out of order or with an unusable state."""


class DegenerateInputError(VqmoeError):
    """Input is structurally valid but degenerate (empty mask, empty axis)."""


class FormatError(VqmoeError):
    """A file does not conform to its declared binary/text format."""


class TruncatedFileError(FormatError):
    """A binary file ended before its declared payload was complete."""
