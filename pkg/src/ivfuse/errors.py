"""Exception hierarchy shared by all ivfuse modules.

The CLI maps these onto exit codes: data errors -> 1, config errors -> 2,
numerical failures -> 3.
"""


class IvfuseError(Exception):
    """Base class for every error raised by ivfuse."""


class DataError(IvfuseError):
    """Input data is missing, unreadable, or inconsistent."""


class DimensionMismatchError(DataError, ValueError):
    pass


class ImageTooSmallError(DataError, ValueError):
    pass


class ShapeNotDivisibleError(DataError, ValueError):
    pass


class MalformedMaskError(DataError):
    pass


class RemoteUnreachableError(DataError):
    """The external segmentation service could not be reached."""


class ConfigError(IvfuseError, ValueError):
    pass


class NumericalError(IvfuseError, FloatingPointError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})
