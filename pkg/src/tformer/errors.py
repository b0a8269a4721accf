"""Exception hierarchy shared by every module."""


class TFormerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TFormerError, ValueError):
    """Tensor dimensions are incompatible with the requested operation."""


class ConfigError(TFormerError, ValueError):
    """A configuration value violates a divisibility or range constraint."""


class StateError(TFormerError, RuntimeError):
    """An operation was invoked in the wrong order (e.g. a VJP before forward)."""


class NonFiniteError(TFormerError, FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""
