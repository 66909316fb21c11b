"""
Exception types raised by the simulator.

Plain configuration problems raise ValueError directly; the classes below
mark failures that callers may want to tell apart.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(RuntimeError):
    """An API was called in a state where the call makes no sense."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class InfeasibleBudgetError(ValueError):
    """A layer budget cannot be met without dropping protected layers."""


class ProtocolError(RuntimeError):
    """Client updates do not agree on what was trained."""


class FormatError(ValueError):
    """A file does not follow its expected layout."""
