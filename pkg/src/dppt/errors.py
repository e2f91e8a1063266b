"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class DegenerateBatchError(ValueError):
    """A loss was requested over zero masked positions."""


class SensitivityError(AssertionError):
    """A clipped gradient exceeded its bound. Always a bug."""


class FormatError(ValueError):
    """Checkpoint file has the wrong magic, version or layout."""


class PlannerError(RuntimeError):
    """The scale planner could not reach the target epsilon."""


class DivergenceError(RuntimeError):
    """Training loss blew up (CLI exit code 3)."""
