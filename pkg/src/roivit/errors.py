"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes; see `roivit.cli`.
"""


class RoiVitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RoiVitError):
    """Tensor extents incompatible with the requested operation."""


class UsageError(RoiVitError):
    """An API was called in a way its contract forbids."""


class ConfigError(RoiVitError):
    """Invalid or inconsistent configuration."""


class FormatError(RoiVitError):
    """Malformed file content (PPM images, checkpoints, caches)."""


class DatasetError(RoiVitError):
    """Dataset tree violates the expected layout."""


class GeneratorError(RoiVitError):
    """An ROI generator produced unusable output or could not run."""


class NumericalError(RoiVitError):
    """Non-finite values appeared where the computation requires finite ones."""
