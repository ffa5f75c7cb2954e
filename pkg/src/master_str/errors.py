"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigurationError(ValueError):
    """A configuration value violates a structural constraint."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class FormatError(ValueError):
    """A serialized artifact (image, checkpoint, vocabulary) failed to parse."""
