"""Exception types shared across the package."""


class CascadeError(Exception):
    """Base class for all package errors."""


class DimensionError(CascadeError, ValueError):
    """Incompatible tensor or layer shapes."""


class NumericError(CascadeError, ArithmeticError):
    """A non-finite value appeared where finite numbers are required."""


class StateError(CascadeError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class ContractError(CascadeError, ValueError):
    """Caller violated an input contract (bad box, mask/label mismatch, ...)."""


class ConfigError(CascadeError, ValueError):
    """Invalid configuration value."""


class SamplingError(CascadeError, RuntimeError):
    """No eligible data to draw a sample from."""


class DivergenceError(CascadeError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
