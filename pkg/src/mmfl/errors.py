"""Exception types shared across the package."""


class MMFLError(Exception):
    """Base class for all package errors."""


class ScenarioError(MMFLError, ValueError):
    """Invalid scenario or task description."""


class ShapeError(MMFLError, ValueError):
    """Parameter or feature dimensions do not line up."""


class NumericError(MMFLError, FloatingPointError):
    """A non-finite value appeared during training."""

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = dict(context or {})


class ConfigError(MMFLError, ValueError):
    """Bad policy or scenario configuration."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class EmptyRoundError(MMFLError, ValueError):
    """round(C*K) is zero, so no client would be active."""


class EmptySelection(MMFLError, ValueError):
    """A task received no clients this round; it skips aggregation."""


class OptimizationError(MMFLError, RuntimeError):
    """A convex subproblem failed to reach the requested gradient tolerance."""


class UndefinedSkewError(MMFLError, ZeroDivisionError):
    """The selection-skew denominator is zero."""


class TrainingAborted(MMFLError, RuntimeError):
    """A round failed; ``metrics`` holds the rounds completed before it."""

    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics
