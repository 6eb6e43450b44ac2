"""Exception hierarchy shared by every layer of the package."""


class NNFabricError(Exception):
    """Base class. ``node`` names the graph node an error is attributed to."""

    kind = "error"

    def __init__(self, message="", node=None):
        super().__init__(message)
        self.message = message
        self.node = node

    def __str__(self):
        if self.node is not None:
            return f"{self.node}: {self.message}"
        return self.message


class ShapeError(NNFabricError, ValueError):
    kind = "shape_error"


class AxisError(NNFabricError, ValueError):
    kind = "axis_error"


class TensorIndexError(NNFabricError, IndexError):
    kind = "index_error"


class GraphError(NNFabricError):
    kind = "graph_error"


class CycleError(GraphError):
    kind = "cycle"


class MissingSourceError(GraphError):
    kind = "missing_source"


class ConfigError(NNFabricError):
    kind = "config_error"


class VocabError(NNFabricError):
    kind = "vocab_error"


class PathError(NNFabricError):
    kind = "path_error"

    def __init__(self, message="", prefix="", node=None):
        super().__init__(message, node)
        self.prefix = prefix


class TraceError(NNFabricError):
    kind = "trace_error"


class NoInvocationError(TraceError):
    kind = "no_invocation"


class ValidationError(NNFabricError):
    kind = "validation"

    def __init__(self, issues, message=None):
        self.issues = list(issues)
        if message is None:
            message = "; ".join(str(i) for i in self.issues[:5]) or "validation failed"
        super().__init__(message)


class ExecutionError(NNFabricError):
    kind = "execution"


class SessionError(NNFabricError):
    kind = "session_error"


class UnknownSessionValue(SessionError):
    kind = "unknown_session_value"


class SessionClosed(SessionError):
    kind = "session_closed"


class UnknownSession(SessionError):
    kind = "unknown_session"


class SessionExpired(SessionError):
    kind = "session_expired"


class DecodeError(NNFabricError):
    kind = "decode"


class FrameTooLarge(DecodeError):
    kind = "frame_too_large"


class TransportError(NNFabricError):
    kind = "transport"


class ConnectionClosed(TransportError):
    kind = "connection_closed"


class Timeout(TransportError):
    kind = "timeout"


class RemoteError(NNFabricError):
    """A server-side failure that has no more specific local exception."""

    def __init__(self, kind, message="", node=None):
        super().__init__(message, node)
        self.kind = kind

