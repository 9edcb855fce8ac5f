"""Exception types shared across the toolkit."""


class SmidentError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SmidentError):
    """Invalid configuration or input data (user-fixable)."""


class NumericalError(SmidentError):
    """A numerical routine failed to produce a certified result."""


class EstimationError(NumericalError):
    """An estimation procedure could not reach a decision.

    Carries a human-readable suggestion for how to adjust the inputs
    (longer record, larger horizon range, wider grid, ...).
    """

    def __init__(self, message, suggestion=None):
        if suggestion:
            message = f"{message} Suggestion: {suggestion}"
        super().__init__(message)
        self.suggestion = suggestion
