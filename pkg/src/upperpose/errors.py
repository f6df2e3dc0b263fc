"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, NumericError -> 3,
IntegrityError -> 4.
"""


class UpperPoseError(Exception):
    """Base class for all package errors."""


class ConfigError(UpperPoseError):
    """Invalid run configuration (unknown key, bad value, indivisible count)."""


class DimensionError(UpperPoseError):
    """Shape contract violation; message names the offending shapes."""


class NumericError(UpperPoseError):
    """Non-finite value or numerically degenerate input."""


class IntegrityError(UpperPoseError):
    """Corrupt, truncated, or version-incompatible persisted file."""
