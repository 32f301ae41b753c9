"""Exception hierarchy shared across the package."""


class DeepRbfError(Exception):
    """Base class for every error raised by deeprbf."""


class ShapeError(DeepRbfError, ValueError):
    pass


class NumericError(DeepRbfError, ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class StateError(DeepRbfError, RuntimeError):
    pass


class InputError(DeepRbfError, ValueError):
    pass


class ConfigError(DeepRbfError, ValueError):
    """Invalid run configuration. ``field`` names the offending config path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class RbdsError(DeepRbfError, ValueError):
    """Base for dataset container parse errors."""


class MagicError(RbdsError):
    pass


class VersionError(RbdsError):
    pass


class TruncatedError(RbdsError):
    pass


class CheckpointError(DeepRbfError, ValueError):
    pass
