"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or is otherwise numerically invalid."""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class ConfigError(ValueError):
    """A run configuration value or file is invalid."""


class OracleError(RuntimeError):
    """A test oracle could not be evaluated reliably."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with the run config."""


class GarmentSpecError(ValueError):
    """A procedural garment description cannot be rendered as requested."""
