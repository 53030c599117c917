class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A scalar argument is outside its admissible range."""


class ConfigError(ValueError):
    """A configuration value violates a constraint."""


class UsageError(RuntimeError):
    pass


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""


class TruncationError(FormatError):
    pass


class NumericalError(ArithmeticError):
    """A non-finite value appeared in a pipeline stage."""
