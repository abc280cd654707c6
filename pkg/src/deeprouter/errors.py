"""Exception types shared across the package."""


class DeepRouterError(Exception):
    """Base class for all package errors."""


class ShapeError(DeepRouterError, ValueError):
    """Array dimensions do not match what an operation requires."""


class ConfigError(DeepRouterError, ValueError):
    """A run configuration is invalid (schema violation, bad grid, ...)."""


class DataFormatError(DeepRouterError, ValueError):
    """An input file (CSV, manifest XML, vocabulary) is malformed."""
