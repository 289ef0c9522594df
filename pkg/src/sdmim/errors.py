"""Shared exception types."""


class ShapeError(ValueError):
    """Array or image dimensions violate an operation's contract."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class ContractError(RuntimeError):
    """A caller violated an internal precondition."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, malformed, or incompatible."""


class NumericalError(RuntimeError):
    """A forward pass produced a non-finite value."""
