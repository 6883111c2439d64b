"""Exceptions shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates its documented invariant."""


class NumericalError(ArithmeticError):
    """A computation produced or received a non-finite number."""


class EmptySelectionError(ValueError):
    """An operation that needs at least one selected column got none."""
