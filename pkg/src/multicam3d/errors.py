"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A numeric argument is outside the operation's legal domain."""


class ContractError(RuntimeError):
    """An API was called in a state that violates its contract."""


class ConfigError(ValueError):
    """A configuration value is invalid or unknown."""
