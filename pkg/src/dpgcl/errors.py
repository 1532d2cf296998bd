"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's preconditions."""


class UsageError(RuntimeError):
    """An object was used outside its lifecycle (e.g. a tape consumed twice)."""


class CalibrationError(RuntimeError):
    """No noise multiplier inside the search bracket meets the privacy target."""


class SensitivityViolation(AssertionError):
    """A measured gradient sensitivity exceeded its theoretical bound."""


class ConfigError(ValueError):
    """A run configuration is malformed, incomplete or has unknown keys."""
