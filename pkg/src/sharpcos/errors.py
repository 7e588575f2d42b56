"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an op."""


class UsageError(RuntimeError):
    """An API was called in a state where the call is meaningless."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor that must stay finite.

    ``where`` names the op or layer that produced the first bad value.
    """

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message)
        self.where = where


class ConfigError(ValueError):
    """Invalid configuration key or value. ``key`` holds the dotted path."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class DataFormatError(ValueError):
    """Malformed or missing dataset file."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""
