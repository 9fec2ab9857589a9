"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/user mistakes exit 1,
everything else unexpected exits 2.
"""


class SpadeError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SpadeError, ValueError):
    """Invalid configuration: bad field values, unknown keys, missing taps."""


class ParameterError(SpadeError, ValueError):
    """A query parameter is out of range (e.g. more neighbors than rows)."""


class ShapeMismatchError(SpadeError, ValueError):
    """Tensor shapes disagree with each other or with a sidecar."""


class ModelLoadError(SpadeError):
    """Portable model file is missing or malformed."""


class NumericError(SpadeError):
    """Non-finite values appeared where finite ones are required."""


class ArchiveError(SpadeError):
    """Feature archive is missing, incomplete, or inconsistent."""


class DatasetError(SpadeError):
    """Dataset directory layout or file contents violate expectations."""


class UndefinedMetricError(SpadeError):
    """A metric has no defined value for the given inputs."""
