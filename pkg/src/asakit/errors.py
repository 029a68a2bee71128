"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (see cli.py), so raising the
right class is part of the external contract.
"""


class AsaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AsaError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(AsaError):
    """A configuration value is missing, malformed, or inconsistent."""


class DataError(AsaError):
    """A dataset, manifest, or checkpoint on disk is missing or corrupt."""


class NumericError(AsaError):
    """A computation produced a non-finite or otherwise invalid value."""
