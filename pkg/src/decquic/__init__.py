"""decquic: estimate per-window HTTP/3 response counts from QUIC trace images."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DecquicError,
    EvalError,
    GradientCheckError,
    TraceParseError,
    TraceValidationError,
)
from .trace import PacketRecord, ResponseEvent, Trace, parse_trace, write_trace

__all__ = [
    "__version__",
    "ConfigError",
    "DecquicError",
    "EvalError",
    "GradientCheckError",
    "TraceParseError",
    "TraceValidationError",
    "PacketRecord",
    "ResponseEvent",
    "Trace",
    "parse_trace",
    "write_trace",
]
