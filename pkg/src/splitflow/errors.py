"""Exception hierarchy shared by every splitflow module."""


class SplitFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(SplitFlowError, ValueError):
    """Shapes or embedding dimensions do not line up."""


class DomainError(SplitFlowError, ValueError):
    """A scalar argument lies outside its admissible range."""


class ConfigError(SplitFlowError, ValueError):
    """Invalid schedule, configuration or decomposition request."""


class StateError(SplitFlowError, RuntimeError):
    """Cached state does not match the object it is used with."""


class NumericError(SplitFlowError, ArithmeticError):
    """A non-finite value appeared during an editing run."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TrainingError(NumericError):
    """Training diverged."""


class ParseError(SplitFlowError, ValueError):
    """An LLM reply could not be turned into a list of sub-prompts."""

    def __init__(self, message, raw=""):
        super().__init__(message)
        self.raw = raw


class NetworkError(SplitFlowError, ConnectionError):
    """The chat-completion endpoint could not be reached or answered badly."""
