"""Scan a model and validate an intervention graph using shapes only.

``scan`` propagates shapes through the module tree with each kind's shape rule,
so it never touches parameter data and never counts as a forward pass.
``validate`` then walks the graph with the same shape rules the tensor ops use
and reports every inconsistency as a :class:`ValidationIssue`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from . import tensor as T
from .errors import AxisError, CycleError, GraphError, ShapeError, TensorIndexError
from .graph import HOOK_OPS, PORT_OF_OP, Graph, HookPoint, replacement_families, topological_order
from .modules import Module, ShapeRecorder

DTYPE = "f32"


class ShapeSpec(NamedTuple):
    """Shape and dtype of a tensor that is never materialised."""

    shape: tuple
    dtype: str = DTYPE

    def __repr__(self):
        return f"ShapeSpec({self.shape})"


class ShapeTable:
    """Per-invoke module shapes plus the hook event order of one forward.

    Invokes with equal prompt shapes share a single per-shape dict.
    """

    def __init__(self, per_invoke: list | None = None, events: list | None = None):
        # per_invoke[k]: (path, call) -> (input spec, output spec)
        self.per_invoke = list(per_invoke or [])
        # (path, port, call) in execution order
        self.events = list(events or [])
        self._index = {e: i for i, e in enumerate(self.events)}

    @property
    def entries(self) -> dict:
        """Flat view keyed by (path, invoke, call)."""
        return {(path, k, call): v for k, table in enumerate(self.per_invoke)
                for (path, call), v in table.items()}

    def lookup(self, hp: HookPoint):
        return self.lookup_at(hp.path, hp.port, hp.invoke, hp.call)

    def lookup_at(self, path: str, port: str, invoke: int, call: int):
        if not 0 <= invoke < len(self.per_invoke):
            return None
        entry = self.per_invoke[invoke].get((path, call))
        if entry is None:
            return None
        return entry[0] if port == "input" else entry[1]

    def event_index(self, hp: HookPoint) -> int:
        if hp.port == "grad_output":
            return len(self.events)
        return self._index[(hp.path, hp.port, hp.call)]

    def __len__(self):
        return sum(len(t) for t in self.per_invoke)


def scan(m: Module, invocation_shapes) -> ShapeTable:
    """Shape table for running ``m`` on each invocation separately.

    ``invocation_shapes`` holds one (batch, seq) pair per invoke.
    """
    per_invoke = []
    events = None
    by_shape: dict = {}
    for shape in invocation_shapes:
        shape = tuple(shape)
        table = by_shape.get(shape)
        if table is None:
            rec = ShapeRecorder()
            m.infer(shape, rec)
            table = {key: (ShapeSpec(in_shape), ShapeSpec(rec.outputs[key]))
                     for key, in_shape in rec.inputs.items()}
            by_shape[shape] = table
            if events is None:
                events = rec.events
        per_invoke.append(table)
    return ShapeTable(per_invoke, events)


@dataclass
class ValidationIssue:
    kind: str
    node: str | None
    op: str | None = None
    message: str = ""
    expected: object = None
    actual: object = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "node": self.node,
            "op": self.op,
            "message": self.message,
            "expected": _jsonable(self.expected),
            "actual": _jsonable(self.actual),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationIssue":
        return cls(d.get("kind", "unknown"), d.get("node"), d.get("op"), d.get("message", ""),
                   d.get("expected"), d.get("actual"))

    def __str__(self):
        where = f"{self.node} ({self.op})" if self.node else "graph"
        return f"{self.kind} at {where}: {self.message}"


def _jsonable(x):
    if isinstance(x, tuple):
        return [_jsonable(v) for v in x]
    if isinstance(x, list):
        return [_jsonable(v) for v in x]
    return x


_UNKNOWN = object()
_FAILED = object()

_ERROR_KINDS = (
    (ShapeError, "shape-mismatch"),
    (TensorIndexError, "index-out-of-bounds"),
    (AxisError, "axis-out-of-range"),
)


def op_shape(op: str, attrs: dict, args: list) -> tuple:
    """Output shape of ``op``; raises the same errors the tensor op would."""
    if op in ("add", "sub", "mul", "div"):
        return T.broadcast_shape(args[0], args[1])
    if op in ("gelu", "relu"):
        return args[0]
    if op == "matmul":
        return T.matmul_shape(args[0], args[1])
    if op == "getitem":
        return T.index_shape(args[0], attrs["index"])
    if op == "setitem":
        return T.index_set_shape(args[0], attrs["index"], args[1])
    if op == "softmax":
        T.normalize_axis(attrs["axis"], len(args[0]))
        return args[0]
    if op in ("sum", "mean", "argmax"):
        return T.reduce_shape(args[0], attrs.get("axis"), op)
    if op == "reshape":
        return T.reshape_shape(args[0], attrs["shape"])
    if op == "backward_marker":
        if tuple(args[0]) != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {tuple(args[0])}")
        return ()
    raise GraphError(f"no shape rule for {op}")


def validate(g: Graph, table: ShapeTable, session_shapes: dict | None = None) -> list:
    """Symbolically execute ``g`` over shapes; an empty list means executable."""
    session_shapes = session_shapes or {}
    issues: list[ValidationIssue] = []
    try:
        order = topological_order(g)
    except CycleError as e:
        return [ValidationIssue("cycle", e.node, None, e.message)]
    except GraphError as e:
        return [ValidationIssue("dangling-dependency", e.node, None, e.message)]

    shapes: dict = {}
    for name in order:
        node = g.nodes[name]
        deps = [shapes[d] for d in node.deps]
        if any(s is _FAILED for s in deps):
            issues.append(ValidationIssue("skipped", name, node.op, "depends on a node with an issue"))
            shapes[name] = _FAILED
            continue
        if node.op in HOOK_OPS:
            a = node.attrs
            spec = table.lookup_at(a["path"], PORT_OF_OP[node.op], a["invoke"], a["call"])
            if spec is None:
                hp = node.hookpoint()
                issues.append(ValidationIssue(
                    "unknown-hook", name, node.op,
                    f"no {hp.port} event for module {hp.path!r} (invoke {hp.invoke}, call {hp.call})"))
                shapes[name] = _FAILED
            else:
                shapes[name] = spec.shape
            continue
        if node.op == "session_ref":
            shape = session_shapes.get(node.attrs["name"])
            shapes[name] = _UNKNOWN if shape is None else tuple(shape)
            continue
        if node.op == "constant":
            shapes[name] = node.attrs["value"].shape
            continue
        if any(s is _UNKNOWN for s in deps):
            shapes[name] = _UNKNOWN
            continue
        try:
            shapes[name] = tuple(op_shape(node.op, node.attrs, deps))
        except tuple(k for k, _ in _ERROR_KINDS) as e:
            kind = next(label for cls, label in _ERROR_KINDS if isinstance(e, cls))
            if node.op == "backward_marker":
                kind = "not-scalar"
            expected = _expected_for(node.op, deps)
            issues.append(ValidationIssue(kind, name, node.op, e.message, expected, [list(s) for s in deps]))
            shapes[name] = _FAILED

    issues.extend(_check_backward(g))
    if table.events:
        issues.extend(_check_hook_order(g, table, order))
    return issues


def _expected_for(op, deps):
    if op == "setitem" and len(deps) == 2:
        return "value broadcastable to the selected region"
    if op == "matmul" and len(deps) == 2 and deps[0]:
        return f"rhs with leading dimension {deps[0][-1]}"
    if op in ("add", "sub", "mul", "div"):
        return "broadcast-compatible shapes"
    return None


def _check_backward(g: Graph) -> list:
    issues = []
    markers = [n for n in g.nodes.values() if n.op == "backward_marker"]
    for extra in markers[1:]:
        issues.append(ValidationIssue("multiple-backward", extra.name, extra.op,
                                      "only one backward pass per trace"))
    grads = [n for n in g.nodes.values() if n.op == "module_grad_output"]
    if grads and not markers:
        issues.append(ValidationIssue("missing-backward", grads[0].name, grads[0].op,
                                      "gradient requested but no backward() in this trace"))
    if markers:
        for anc in _ancestors(g, markers[0].name):
            if g.nodes[anc].op == "module_grad_output":
                issues.append(ValidationIssue("grad-cycle", markers[0].name, markers[0].op,
                                              f"loss depends on gradient node {anc}"))
                break
    return issues


def _ancestors(g: Graph, name: str) -> set:
    seen, stack = set(), list(g.nodes[name].deps)
    while stack:
        n = stack.pop()
        if n not in seen:
            seen.add(n)
            stack.extend(g.nodes[n].deps)
    return seen


def _check_hook_order(g: Graph, table: ShapeTable, order: list) -> list:
    """A replacement must only read values available when its hook fires."""
    families = replacement_families(g)
    if not families:
        return []
    latest: dict[str, int] = {}
    for name in order:
        node = g.nodes[name]
        if node.op in HOOK_OPS:
            hp = node.hookpoint()
            try:
                latest[name] = table.event_index(hp)
            except KeyError:
                latest[name] = -1
        else:
            latest[name] = max((latest[d] for d in node.deps), default=-1)
    issues = []
    for source, members in families.items():
        node = g.nodes[source]
        hp = node.hookpoint()
        try:
            at = table.event_index(hp)
        except KeyError:
            continue
        for member in members:
            if latest[member] > at:
                issues.append(ValidationIssue(
                    "hook-order", member, "setitem",
                    f"writes {PORT_OF_OP[node.op]} of {hp.path!r} using a value produced later in the forward pass"))
    return issues
