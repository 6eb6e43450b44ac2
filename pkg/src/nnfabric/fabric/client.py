"""Blocking client for the fabric server; one connection per request."""
from __future__ import annotations

import socket

from ..errors import (
    ConnectionClosed,
    DecodeError,
    RemoteError,
    SessionExpired,
    Timeout,
    TransportError,
    UnknownSession,
    UnknownSessionValue,
    ValidationError,
)
from ..validator import ValidationIssue
from ..wire import DEFAULT_MAX_FRAME_BYTES, decode_tensor, read_frame, trace_request, write_frame


def parse_endpoint(endpoint: str) -> tuple:
    host, sep, port = str(endpoint).rpartition(":")
    if not sep or not host or not port.isdigit():
        raise TransportError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


def request(endpoint: str, message: dict, timeout: float = 30.0,
            max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> dict:
    host, port = parse_endpoint(endpoint)
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.settimeout(timeout)
            write_frame(sock, message, max_frame_bytes)
            resp = read_frame(sock, max_frame_bytes)
    except socket.timeout:
        raise Timeout(f"no response from {endpoint} within {timeout:g}s") from None
    except OSError as e:
        raise TransportError(f"cannot reach {endpoint}: {e}") from None
    if resp is None:
        raise ConnectionClosed(f"{endpoint} closed the connection without replying")
    if not isinstance(resp, dict) or "type" not in resp:
        raise DecodeError("malformed response")
    return resp


def raise_for_error(resp: dict) -> dict:
    if resp.get("type") != "error":
        return resp
    kind, message, node = resp.get("kind"), resp.get("message", ""), resp.get("node")
    if kind == "validation":
        raise ValidationError([ValidationIssue.from_dict(d) for d in resp.get("issues", [])])
    simple = {
        "unknown_session": UnknownSession,
        "session_expired": SessionExpired,
        "unknown_session_value": UnknownSessionValue,
        "decode": DecodeError,
    }
    if kind in simple:
        raise simple[kind](message, node=node)
    raise RemoteError(kind, message, node)


def client_execute(endpoint: str, model_id: str, graph, invocations, session_id=None,
                   timeout: float = 30.0) -> dict:
    """Send a trace; returns the saved tensors keyed by node name."""
    resp = raise_for_error(request(endpoint, trace_request(model_id, graph, invocations, session_id), timeout))
    if resp.get("type") != "result":
        raise DecodeError(f"unexpected response type {resp.get('type')!r}")
    return {k: decode_tensor(v) for k, v in resp["saved"].items()}


def open_session(endpoint: str, model_id: str, timeout: float = 30.0) -> str:
    resp = raise_for_error(request(endpoint, {"type": "session_open", "model_id": model_id}, timeout))
    return resp["session_id"]


def close_session(endpoint: str, session_id: str, timeout: float = 30.0) -> None:
    raise_for_error(request(endpoint, {"type": "session_close", "session_id": session_id}, timeout))


def list_models(endpoint: str, timeout: float = 30.0) -> dict:
    return raise_for_error(request(endpoint, {"type": "model_list"}, timeout))["models"]
