"""Exception types shared across the package."""


class DecquicError(Exception):
    """Base class for all errors raised by this package."""


class TraceParseError(DecquicError):
    """A packet or event stream could not be parsed."""


class TraceValidationError(DecquicError):
    """Parsed data violates a trace invariant (negative time, zero length, ...)."""


class ConfigError(DecquicError):
    """A configuration value is out of range or degenerate."""


class EvalError(DecquicError):
    """Evaluation inputs are malformed (length mismatch, empty vectors, ...)."""


class GradientCheckError(DecquicError):
    """The full-network gradient check exceeded its tolerance."""
