"""Exception hierarchy. The CLI maps each family onto an exit code."""


class PatchifierError(Exception):
    exit_code = 1


class ConfigError(PatchifierError, ValueError):
    """Bad configuration, shapes, or usage (exit 1)."""

    exit_code = 1


class ShapeError(ConfigError):
    pass


class DegenerateError(ConfigError):
    """An op received input too small to be well defined (e.g. one-sample batchnorm)."""


class DataError(PatchifierError):
    """Unreadable or invalid input data (exit 2)."""

    exit_code = 2


class NumericError(PatchifierError, ArithmeticError):
    """NaN/Inf produced, or a gradient check failed (exit 3)."""

    exit_code = 3
