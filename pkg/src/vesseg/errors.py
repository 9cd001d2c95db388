"""Exception types shared across the package.

The split mirrors how the command line reports failures: configuration and
usage problems exit with status 1, everything that goes wrong at runtime
(bad state, numeric blow-ups, broken files) exits with status 2.
"""


class VessegError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VessegError):
    """An array argument has the wrong rank, size, or dtype."""


class ConfigError(VessegError):
    """A configuration value, flag, or input file description is invalid."""


class StateError(VessegError):
    """An object was used in an order its lifecycle does not allow."""


class OptimError(VessegError):
    """The optimizer hit a non-finite gradient or similar numeric failure."""


class DataError(VessegError):
    """An image, manifest, cache, or checkpoint file could not be used."""
