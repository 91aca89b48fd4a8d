"""Exception types raised by the library.

Each class marks one failure kind named in the operation contracts, so
callers can catch precisely what they expect (a shape mismatch versus a
numerical blow-up, say) instead of string-matching messages.
"""


class DimensionError(ValueError):
    """Operand shapes or axes do not satisfy an operation's contract."""


class ArgumentError(ValueError):
    """A scalar or option argument is out of its allowed range."""


class UnsupportedConfigError(ValueError):
    """A configuration combination the operator does not define."""


class StateError(RuntimeError):
    """An operation was called in the wrong order, e.g. backward without
    the forward cache it needs."""


class NumericError(ArithmeticError):
    """Non-finite values appeared, or an iteration failed to converge."""


class FormatError(ValueError):
    """A serialized payload is malformed (bad magic, version, or header)."""


class DataConsistencyError(ValueError):
    """Two data sources that must agree do not (e.g. image/label counts)."""


class DegenerateMapError(ValueError):
    """A derived map is identically zero where a nonzero mass is required."""


class UndefinedMetricError(ValueError):
    """The requested statistic does not exist for this input (zero norm,
    zero covariance, and similar)."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite; the run was aborted."""
