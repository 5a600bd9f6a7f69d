"""Exception hierarchy shared across the package."""


class RadioconError(Exception):
    """Base class for all radiocon errors."""


class ShapeMismatchError(RadioconError):
    """An operand has dimensions incompatible with the operation."""


class DomainError(RadioconError):
    """An input lies outside the mathematical domain of the operation."""


class ParameterError(RadioconError):
    """A hyperparameter or option value is invalid."""


class ContractError(RadioconError):
    """A documented precondition or invariant was violated."""


class ConfigError(RadioconError):
    """A training/runtime configuration is invalid."""


class DataError(RadioconError):
    """A dataset, manifest, or image file is missing or malformed."""


class CheckpointError(RadioconError):
    """A checkpoint file is corrupt, truncated, or of an unsupported version."""


class NumericError(RadioconError):
    """Training produced a non-finite value."""
