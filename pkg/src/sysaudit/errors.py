"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, schema or shape."""


class ShapeError(ConfigurationError):
    """Operand shapes are inconsistent for an operation."""


class StateError(RuntimeError):
    """An operation was called in the wrong order."""


class DomainError(ValueError):
    """Input lies outside the domain of an observable."""


class TrainingError(RuntimeError):
    """Training diverged or produced a non-finite loss."""


class AttackError(RuntimeError):
    """An attack produced a non-finite gradient or objective."""
