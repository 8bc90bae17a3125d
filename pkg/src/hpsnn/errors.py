"""Exception hierarchy shared across the package."""


class HpsnnError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(HpsnnError, ValueError):
    """Array shapes do not line up with the declared layer dimensions."""


class NumericError(HpsnnError, ArithmeticError):
    """A computation produced non-finite values; fail fast, never clamp."""


class DegenerateInputError(HpsnnError, ValueError):
    """An input is structurally unusable (e.g. a zero-norm feature)."""


class DataError(HpsnnError, ValueError):
    """A dataset file or request is malformed or unsatisfiable."""


class ConfigError(HpsnnError, ValueError):
    """A run configuration is malformed or out of range."""


class CheckpointError(HpsnnError, ValueError):
    """A checkpoint container is malformed or truncated."""
