"""Canonical JSON encoding for tensors, graphs and messages, plus framing.

Tensors travel as base64 of little-endian float32 bytes so that a value
computed remotely is bit-identical to the same value computed locally.  Graph
encoding is canonical: fixed key order, no whitespace, attrs sorted by key.

A frame is a 4-byte big-endian length followed by that many bytes of UTF-8
JSON.
"""
from __future__ import annotations

import base64
import binascii
import json
import math
import struct

import numpy as np

from .errors import ConnectionClosed, DecodeError, FrameTooLarge, GraphError
from .graph import NAME_RE, OPS, Graph, Node, check_attrs
from .tensor import TensorValue

VERSION = 1
DEFAULT_MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">I")

MESSAGE_TYPES = (
    "trace", "session_open", "session_close", "model_list",
    "result", "error", "session_opened", "model_listing",
)


def dumps(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True, allow_nan=False).encode("utf-8")


def loads(data):
    try:
        if isinstance(data, (bytes, bytearray, memoryview)):
            data = bytes(data).decode("utf-8")
        return json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DecodeError(f"invalid JSON: {e}") from None


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------


def encode_tensor(t: TensorValue) -> dict:
    raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    return {"dtype": "f32", "shape": list(t.shape), "data_b64": base64.b64encode(raw).decode("ascii")}


def decode_tensor(w) -> TensorValue:
    if not isinstance(w, dict) or set(w) != {"dtype", "shape", "data_b64"}:
        raise DecodeError("tensor must have exactly dtype, shape, data_b64")
    if w["dtype"] != "f32":
        raise DecodeError(f"unsupported dtype {w['dtype']!r}")
    shape = w["shape"]
    if not isinstance(shape, list) or not all(_is_count(d) for d in shape):
        raise DecodeError(f"invalid shape {shape!r}")
    if not isinstance(w["data_b64"], str):
        raise DecodeError("data_b64 must be a string")
    try:
        raw = base64.b64decode(w["data_b64"], validate=True)
    except (binascii.Error, ValueError):
        raise DecodeError("data_b64 is not valid base64") from None
    expected = 4 * math.prod(shape)
    if len(raw) != expected:
        raise DecodeError(f"tensor of shape {shape} needs {expected} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return TensorValue._wrap(arr.copy())


def _is_count(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


# ---------------------------------------------------------------------------
# Index expressions
# ---------------------------------------------------------------------------


def encode_index(terms) -> list:
    out = []
    for term in terms:
        if isinstance(term, int):
            out.append({"t": "i", "v": term})
        elif isinstance(term, slice):
            out.append({"t": "s", "a": term.start, "b": term.stop, "c": term.step})
        else:
            out.append({"t": "l", "v": list(term)})
    return out


def decode_index(items) -> tuple:
    if not isinstance(items, list):
        raise DecodeError("index must be a list of terms")
    terms = []
    for item in items:
        if not isinstance(item, dict):
            raise DecodeError(f"bad index term {item!r}")
        tag = item.get("t")
        if tag == "i" and set(item) == {"t", "v"} and _is_int(item["v"]):
            terms.append(item["v"])
        elif tag == "s" and set(item) == {"t", "a", "b", "c"} and all(
            v is None or _is_int(v) for v in (item["a"], item["b"], item["c"])
        ):
            terms.append(slice(item["a"], item["b"], item["c"]))
        elif tag == "l" and set(item) == {"t", "v"} and isinstance(item["v"], list) and all(
            _is_int(v) for v in item["v"]
        ):
            terms.append(list(item["v"]))
        else:
            raise DecodeError(f"bad index term {item!r}")
    return tuple(terms)


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


def _encode_attr(key, value):
    if key == "index":
        return encode_index(value)
    if key == "value":
        return encode_tensor(value)
    if key == "shape":
        return list(value)
    return value


def _decode_attr(key, value):
    if key == "index":
        return decode_index(value)
    if key == "value":
        return decode_tensor(value)
    return value


def graph_to_obj(g: Graph) -> dict:
    nodes = []
    for n in g.nodes.values():
        attrs = {k: _encode_attr(k, n.attrs[k]) for k in sorted(n.attrs)}
        nodes.append({"name": n.name, "op": n.op, "deps": list(n.deps), "attrs": attrs, "saved": bool(n.saved)})
    return {"version": VERSION, "nodes": nodes}


def graph_from_obj(obj) -> Graph:
    if not isinstance(obj, dict) or set(obj) != {"version", "nodes"}:
        raise DecodeError("graph must have exactly version and nodes")
    if obj["version"] != VERSION or isinstance(obj["version"], bool):
        raise DecodeError(f"unsupported graph version {obj['version']!r}")
    if not isinstance(obj["nodes"], list):
        raise DecodeError("nodes must be a list")
    g = Graph()
    for raw in obj["nodes"]:
        if not isinstance(raw, dict) or set(raw) != {"name", "op", "deps", "attrs", "saved"}:
            raise DecodeError("node must have exactly name, op, deps, attrs, saved")
        name, op, deps, attrs, saved = raw["name"], raw["op"], raw["deps"], raw["attrs"], raw["saved"]
        if not isinstance(name, str) or not NAME_RE.match(name):
            raise DecodeError(f"invalid node name {name!r}")
        if op not in OPS:
            raise DecodeError(f"unknown op {op!r}", node=name)
        if name in g.nodes:
            raise DecodeError(f"duplicate node name {name!r}", node=name)
        if not isinstance(deps, list) or not all(isinstance(d, str) for d in deps):
            raise DecodeError("deps must be a list of names", node=name)
        for d in deps:
            if d not in g.nodes:
                raise DecodeError(f"dangling dependency {d!r}", node=name)
        if not isinstance(attrs, dict) or not isinstance(saved, bool):
            raise DecodeError("attrs must be an object and saved a boolean", node=name)
        decoded = {k: _decode_attr(k, v) for k, v in attrs.items()}
        try:
            check_attrs(op, deps, decoded)
        except GraphError as e:
            raise DecodeError(e.message, node=name) from None
        g.insert(Node(name, op, list(deps), decoded, saved))
    return g


def encode_graph(g: Graph) -> bytes:
    return dumps(graph_to_obj(g))


def decode_graph(data) -> Graph:
    return graph_from_obj(loads(data))


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


def trace_request(model_id: str, graph: Graph, invocations, session_id=None) -> dict:
    return {
        "type": "trace",
        "model_id": model_id,
        "session_id": session_id,
        "graph": graph_to_obj(graph),
        "invocations": [[int(t) for t in p] for p in invocations],
    }


def result_response(saved: dict) -> dict:
    return {"type": "result", "status": "ok", "saved": {k: encode_tensor(v) for k, v in saved.items()}}


def error_response(kind: str, message: str, node=None, issues=None) -> dict:
    msg = {"type": "error", "status": "error", "kind": kind, "message": message, "node": node}
    if issues is not None:
        msg["issues"] = [i.to_dict() for i in issues]
    return msg


def parse_invocations(raw) -> list:
    if not isinstance(raw, list) or not raw:
        raise DecodeError("invocations must be a non-empty list of token-id lists")
    out = []
    for p in raw:
        if not isinstance(p, list) or not p or not all(_is_count(t) for t in p):
            raise DecodeError("each invocation must be a non-empty list of non-negative integers")
        out.append(list(p))
    return out


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------


def _read_exact(stream, n: int) -> bytes:
    chunks, got = [], 0
    recv = getattr(stream, "recv", None)
    while got < n:
        chunk = recv(min(n - got, 1 << 20)) if recv is not None else stream.read(n - got)
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES):
    """Read one message; ``None`` on a clean end of stream."""
    header = _read_exact(stream, 4)
    if not header:
        return None
    if len(header) < 4:
        raise ConnectionClosed("stream ended inside a frame header")
    (n,) = _HEADER.unpack(header)
    if n > max_frame_bytes:
        raise FrameTooLarge(f"frame of {n} bytes exceeds limit {max_frame_bytes}")
    body = _read_exact(stream, n)
    if len(body) < n:
        raise ConnectionClosed(f"stream ended after {len(body)} of {n} frame bytes")
    return loads(body)


def frame_bytes(message, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> bytes:
    body = message if isinstance(message, (bytes, bytearray)) else dumps(message)
    if len(body) > max_frame_bytes:
        raise FrameTooLarge(f"frame of {len(body)} bytes exceeds limit {max_frame_bytes}")
    return _HEADER.pack(len(body)) + bytes(body)


def write_frame(stream, message, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> None:
    data = frame_bytes(message, max_frame_bytes)
    if hasattr(stream, "sendall"):
        stream.sendall(data)
    else:
        stream.write(data)
        flush = getattr(stream, "flush", None)
        if flush is not None:
            flush()


async def read_frame_async(reader, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES):
    import asyncio

    try:
        header = await reader.readexactly(4)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise ConnectionClosed("stream ended inside a frame header") from None
    (n,) = _HEADER.unpack(header)
    if n > max_frame_bytes:
        raise FrameTooLarge(f"frame of {n} bytes exceeds limit {max_frame_bytes}")
    try:
        body = await reader.readexactly(n)
    except asyncio.IncompleteReadError as e:
        raise ConnectionClosed(f"stream ended after {len(e.partial)} of {n} frame bytes") from None
    return loads(body)


async def write_frame_async(writer, message, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> None:
    writer.write(frame_bytes(message, max_frame_bytes))
    await writer.drain()
