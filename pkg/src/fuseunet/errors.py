"""Exception taxonomy shared across the package.

CLI exit-code mapping: ConfigError (and argparse usage problems) -> 1,
DataError -> 2, NumericError -> 3.
"""


class FuseUNetError(Exception):
    """Base class for all package errors."""


class ConfigError(FuseUNetError):
    """Invalid configuration, usage, or incompatible shapes/options."""


class ShapeError(ConfigError):
    """Tensor shape mismatch between operands or against a contract."""


class DataError(FuseUNetError):
    """Corrupt, truncated, or incomplete on-disk data."""


class NumericError(FuseUNetError):
    """Non-finite values or out-of-domain numeric inputs."""
