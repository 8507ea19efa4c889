"""Exception types shared across the package.

CLI exit-code mapping: ConfigError/CalibParseError/ShapeError/ContractError
are validation failures (exit 2), NumericError and subclasses are numeric
failures (exit 3).
"""


class VoxelFuseError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VoxelFuseError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(VoxelFuseError, ValueError):
    """An operation's calling contract was violated."""


class NumericError(VoxelFuseError, ArithmeticError):
    """Non-finite values or numerically degenerate inputs."""


class DegenerateVectorError(NumericError):
    """Vector norm too close to zero to normalize safely."""


class ConfigError(VoxelFuseError, ValueError):
    """Invalid, inconsistent, or unparseable run configuration."""


class CalibParseError(ConfigError):
    """Calibration file is malformed."""
