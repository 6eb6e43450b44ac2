"""Intervention graph: named nodes over a closed op vocabulary.

Nodes are kept in insertion order, and every dependency must name an earlier
node.  Module hook nodes and ``session_ref`` nodes are *sources*: their values
are bound from outside, either by :func:`execute_pure` or by the tracer's
interleaved executor.  Everything else is a pure function of its dependencies.

A ``setitem`` chain rooted at a module input/output source is a *replacement*:
the interleaver writes its result back into the model.  Such nodes are
effectful and stay alive through dead-node elimination even when unsaved.
"""
from __future__ import annotations

import heapq
import re
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import (
    AxisError,
    CycleError,
    GraphError,
    MissingSourceError,
    NNFabricError,
    ShapeError,
    TensorIndexError,
)
from .tensor import TensorValue

SOURCE_OPS = ("module_input", "module_output", "module_grad_output", "session_ref")
HOOK_OPS = ("module_input", "module_output", "module_grad_output")
BINARY_OPS = ("add", "sub", "mul", "div", "matmul")
UNARY_OPS = ("gelu", "relu")
REDUCE_OPS = ("sum", "mean", "argmax")
OPS = SOURCE_OPS + ("constant", "getitem", "setitem") + BINARY_OPS + ("softmax",) + UNARY_OPS + REDUCE_OPS + (
    "reshape",
    "backward_marker",
)

PORT_OF_OP = {"module_input": "input", "module_output": "output", "module_grad_output": "grad_output"}
OP_OF_PORT = {v: k for k, v in PORT_OF_OP.items()}

NAME_RE = re.compile(r"^[a-z_]+_[0-9]+$")

_ARITY = {
    **{op: 0 for op in SOURCE_OPS + ("constant",)},
    "getitem": 1,
    "setitem": 2,
    **{op: 2 for op in BINARY_OPS},
    **{op: 1 for op in UNARY_OPS + REDUCE_OPS + ("softmax", "reshape", "backward_marker")},
}


@dataclass(frozen=True, slots=True)
class HookPoint:
    """One tensor event in a traced execution."""

    path: str
    port: str
    invoke: int = 0
    call: int = 0

    def __post_init__(self):
        if self.port not in OP_OF_PORT:
            raise GraphError(f"unknown hook port {self.port!r}")


@dataclass(slots=True)
class Node:
    name: str
    op: str
    deps: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    saved: bool = False

    @property
    def is_source(self) -> bool:
        return self.op in SOURCE_OPS

    def hookpoint(self) -> HookPoint:
        a = self.attrs
        return HookPoint(a["path"], PORT_OF_OP[self.op], a["invoke"], a["call"])


def _is_nonneg_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def check_attrs(op: str, deps: list, attrs: dict) -> None:
    """Raise GraphError unless ``attrs``/``deps`` are well formed for ``op``."""
    if op in HOOK_OPS and not deps and len(attrs) == 3:
        # fast path for the most common node kind
        path, invoke, call = attrs.get("path"), attrs.get("invoke"), attrs.get("call")
        if type(path) is str and type(invoke) is int and type(call) is int and invoke >= 0 and call >= 0:
            return
    if op not in OPS:
        raise GraphError(f"unknown op {op!r}")
    if len(deps) != _ARITY[op]:
        raise GraphError(f"{op} takes {_ARITY[op]} dependencies, got {len(deps)}")
    allowed = {"store"}
    if "store" in attrs and (not isinstance(attrs["store"], str) or not attrs["store"]):
        raise GraphError("store name must be a non-empty string")
    if op in HOOK_OPS:
        allowed |= {"path", "invoke", "call"}
        if not isinstance(attrs.get("path"), str):
            raise GraphError(f"{op} needs a string path")
        if not _is_nonneg_int(attrs.get("invoke")) or not _is_nonneg_int(attrs.get("call")):
            raise GraphError(f"{op} needs non-negative integer invoke and call")
    elif op == "session_ref":
        allowed |= {"name"}
        if not isinstance(attrs.get("name"), str) or not attrs["name"]:
            raise GraphError("session_ref needs a value name")
    elif op == "constant":
        allowed |= {"value"}
        if not isinstance(attrs.get("value"), TensorValue):
            raise GraphError("constant needs a TensorValue")
    elif op in ("getitem", "setitem"):
        allowed |= {"index"}
        if "index" not in attrs:
            raise GraphError(f"{op} needs an index")
        try:
            attrs["index"] = T.normalize_index(attrs["index"])
        except TensorIndexError as e:
            raise GraphError(f"malformed index: {e.message}") from None
    elif op == "softmax":
        allowed |= {"axis"}
        if not isinstance(attrs.get("axis"), int) or isinstance(attrs.get("axis"), bool):
            raise GraphError("softmax needs an integer axis")
    elif op in REDUCE_OPS:
        allowed |= {"axis"}
        axis = attrs.get("axis")
        if axis is not None and (not isinstance(axis, int) or isinstance(axis, bool)):
            raise GraphError(f"{op} axis must be an integer or null")
    elif op == "reshape":
        allowed |= {"shape"}
        shape = attrs.get("shape")
        if not isinstance(shape, (list, tuple)) or not all(isinstance(d, int) and not isinstance(d, bool) for d in shape):
            raise GraphError("reshape needs an integer shape list")
        attrs["shape"] = list(shape)
    extra = set(attrs) - allowed
    if extra:
        raise GraphError(f"unexpected attrs for {op}: {sorted(extra)}")


class Graph:
    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self._counters: dict[str, int] = {}

    def add_node(self, op: str, deps: Iterable[str] = (), attrs: dict | None = None) -> str:
        deps = list(deps)
        attrs = dict(attrs or {})
        for d in deps:
            if d not in self.nodes:
                raise GraphError(f"unknown dependency {d!r}")
        check_attrs(op, deps, attrs)
        n = self._counters.get(op, 0)
        name = f"{op}_{n}"
        while name in self.nodes:
            n += 1
            name = f"{op}_{n}"
        self._counters[op] = n + 1
        self.nodes[name] = Node(name, op, deps, attrs)
        return name

    def insert(self, node: Node) -> None:
        """Add a fully formed node without dependency checks (used by decoders)."""
        if node.name in self.nodes:
            raise GraphError(f"duplicate node name {node.name!r}")
        self.nodes[node.name] = node
        m = re.match(r"^(.*)_([0-9]+)$", node.name)
        if m and m.group(1) == node.op:
            self._counters[node.op] = max(self._counters.get(node.op, 0), int(m.group(2)) + 1)

    def mark_saved(self, name: str) -> None:
        if name not in self.nodes:
            raise GraphError(f"unknown node {name!r}")
        self.nodes[name].saved = True

    @property
    def save_list(self) -> list:
        return [n.name for n in self.nodes.values() if n.saved]

    def stores(self) -> dict:
        """Session value name -> node name for nodes carrying a ``store`` attr."""
        return {n.attrs["store"]: n.name for n in self.nodes.values() if "store" in n.attrs}

    def copy(self) -> "Graph":
        g = Graph()
        for n in self.nodes.values():
            g.nodes[n.name] = Node(n.name, n.op, list(n.deps), dict(n.attrs), n.saved)
        g._counters = dict(self._counters)
        return g

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes.values())

    def __contains__(self, name):
        return name in self.nodes

    def __getitem__(self, name) -> Node:
        return self.nodes[name]

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, saved={self.save_list})"


# ---------------------------------------------------------------------------
# Structure queries
# ---------------------------------------------------------------------------


def topological_order(g: Graph) -> list:
    """Kahn's algorithm; ready nodes are taken in insertion order."""
    position = {name: i for i, name in enumerate(g.nodes)}
    indeg = {}
    dependents: dict[str, list] = {name: [] for name in g.nodes}
    for node in g.nodes.values():
        uniq = set(node.deps)
        for d in uniq:
            if d not in g.nodes:
                raise GraphError(f"{node.name} depends on unknown node {d!r}", node=node.name)
            dependents[d].append(node.name)
        indeg[node.name] = len(uniq)
    heap = [position[n] for n, k in indeg.items() if k == 0]
    heapq.heapify(heap)
    names = list(g.nodes)
    order = []
    while heap:
        name = names[heapq.heappop(heap)]
        order.append(name)
        for dep in dependents[name]:
            indeg[dep] -= 1
            if indeg[dep] == 0:
                heapq.heappush(heap, position[dep])
    if len(order) != len(g.nodes):
        remaining = {n for n in g.nodes if indeg[n] > 0}
        # walk dependencies inside the remainder until one repeats
        cur = next(n for n in g.nodes if n in remaining)
        seen = set()
        while cur not in seen:
            seen.add(cur)
            cur = next(d for d in g.nodes[cur].deps if d in remaining)
        raise CycleError(f"dependency cycle through {cur!r}", node=cur)
    return order


def replacement_families(g: Graph) -> dict:
    """Map each module input/output source to the setitem nodes that rewrite it.

    A setitem belongs to a source's family when its first dependency is the
    source or another member.  Members are listed in insertion order.
    """
    owner: dict[str, str] = {}
    families: dict[str, list] = {}
    for node in g.nodes.values():
        if node.op in ("module_input", "module_output"):
            owner[node.name] = node.name
        elif node.op == "setitem" and node.deps[0] in owner:
            root = owner[node.deps[0]]
            owner[node.name] = root
            families.setdefault(root, []).append(node.name)
    return families


def eliminate_dead(g: Graph) -> Graph:
    """Keep only nodes that can reach a saved value or have an observable effect.

    Returns ``g`` itself when every node is live; callers must not mutate the
    result in place.
    """
    roots = set(g.save_list)
    roots |= set(g.stores().values())
    for members in replacement_families(g).values():
        roots.update(members)
    markers = [n.name for n in g.nodes.values() if n.op == "backward_marker"]

    live: set = set()

    def mark(start):
        stack = list(start)
        while stack:
            name = stack.pop()
            if name in live:
                continue
            live.add(name)
            stack.extend(g.nodes[name].deps)

    mark(roots)
    if any(g.nodes[n].op == "module_grad_output" for n in live):
        mark(markers)

    if len(live) == len(g.nodes):
        return g  # nothing to remove
    out = Graph()
    for node in g.nodes.values():
        if node.name in live:
            out.nodes[node.name] = Node(node.name, node.op, list(node.deps), dict(node.attrs), node.saved)
    out._counters = dict(g._counters)
    return out


def fold_constants(g: Graph) -> Graph:
    """Replace pure nodes whose dependencies are all constants by constants."""
    out = g.copy()
    for node in out.nodes.values():
        if node.is_source or node.op in ("constant", "backward_marker") or not node.deps:
            continue
        if not all(out.nodes[d].op == "constant" for d in node.deps):
            continue
        try:
            value = apply_op(node, [out.nodes[d].attrs["value"] for d in node.deps])
        except NNFabricError:
            continue  # leave it for the validator / executor to report
        attrs = {"value": value}
        if "store" in node.attrs:
            attrs["store"] = node.attrs["store"]
        node.op, node.deps, node.attrs = "constant", [], attrs
    return out


def optimize(g: Graph) -> Graph:
    g = eliminate_dead(g)
    if not any(n.op == "constant" for n in g.nodes.values()):
        return g  # nothing to fold
    return eliminate_dead(fold_constants(g))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def apply_op(node: Node, args: list) -> TensorValue:
    # IEEE semantics: inf/nan propagate silently, as in the model's own ops
    with np.errstate(all="ignore"):
        return _apply(node, args)


def _apply(node: Node, args: list) -> TensorValue:
    op, a = node.op, node.attrs
    if op == "constant":
        return a["value"]
    if op in ("add", "sub", "mul", "div", "gelu", "relu"):
        return T.elementwise(op, *args)
    if op == "matmul":
        return T.matmul(*args)
    if op == "getitem":
        return T.index_get(args[0], a["index"])
    if op == "setitem":
        return T.index_set(args[0], a["index"], args[1])
    if op == "softmax":
        return T.softmax(args[0], a["axis"])
    if op in REDUCE_OPS:
        return T.reduce(op, args[0], a.get("axis"))
    if op == "reshape":
        return T.reshape(args[0], a["shape"])
    if op == "backward_marker":
        return args[0]
    raise GraphError(f"{op} is a source and cannot be applied", node=node.name)


def _annotate(err: NNFabricError, name: str) -> NNFabricError:
    if err.node is None:
        err.node = name
    return err


class Evaluator:
    """Incremental evaluator shared by the pure and interleaved executors.

    Values are dropped once every dependent has consumed them, unless the node
    is in ``keep`` or currently pinned.
    """

    def __init__(self, g: Graph, keep: Iterable[str] = ()):
        self.graph = g
        self.position = {name: i for i, name in enumerate(g.nodes)}
        self.names = list(g.nodes)
        self.keep = set(keep)
        self.values: dict[str, TensorValue] = {}
        self.done: set = set()
        self.missing: dict[str, int] = {}
        self.dependents: dict[str, list] = {name: [] for name in g.nodes}
        self.refs: dict[str, int] = {}
        self.live = 0
        self.peak_live = 0
        self._heap: list = []
        for node in g.nodes.values():
            uniq = list(dict.fromkeys(node.deps))
            for d in uniq:
                if d not in g.nodes:
                    raise GraphError(f"{node.name} depends on unknown node {d!r}", node=node.name)
                self.dependents[d].append(node.name)
            self.missing[node.name] = len(uniq)
        for name in g.nodes:
            self.refs[name] = len(self.dependents[name])
        for node in g.nodes.values():
            if not node.is_source and self.missing[node.name] == 0:
                heapq.heappush(self._heap, self.position[node.name])

    def bind(self, name: str, value: TensorValue) -> None:
        if name in self.done:
            raise GraphError(f"{name} bound twice", node=name)
        self._complete(name, value)

    def pin(self, name: str) -> None:
        self.refs[name] += 1

    def unpin(self, name: str) -> None:
        self._release(name)

    def run(self) -> None:
        nodes = self.graph.nodes
        while self._heap:
            name = self.names[heapq.heappop(self._heap)]
            node = nodes[name]
            try:
                value = apply_op(node, [self.values[d] for d in node.deps])
            except NNFabricError as e:
                raise _annotate(e, name)
            self._complete(name, value)
            for d in dict.fromkeys(node.deps):
                self._release(d)

    def pending(self) -> list:
        return [n for n in self.names if n not in self.done]

    def _complete(self, name, value):
        self.values[name] = value
        self.done.add(name)
        if name not in self.keep:
            self.live += 1
            self.peak_live = max(self.peak_live, self.live)
            if self.refs[name] == 0:
                self._drop(name)
        nodes = self.graph.nodes
        for dep in self.dependents[name]:
            self.missing[dep] -= 1
            if self.missing[dep] == 0 and not nodes[dep].is_source:
                heapq.heappush(self._heap, self.position[dep])

    def _release(self, name):
        self.refs[name] -= 1
        if self.refs[name] == 0 and name not in self.keep and name in self.values:
            self._drop(name)

    def _drop(self, name):
        del self.values[name]
        self.live -= 1


def source_key(node: Node):
    return node.attrs["name"] if node.op == "session_ref" else node.hookpoint()


def execute_pure(g: Graph, sources: dict, stats: dict | None = None) -> dict:
    """Evaluate ``g`` with every source bound from ``sources``.

    ``sources`` maps HookPoint (module hooks) or value name (session refs) to
    TensorValue.  Returns saved node name -> value.  When ``stats`` is given it
    receives ``peak_live``, the largest number of simultaneously held
    non-saved values.
    """
    keep = set(g.save_list) | set(g.stores().values())
    ev = Evaluator(g, keep)
    for node in g.nodes.values():
        if node.is_source:
            key = source_key(node)
            if key not in sources:
                raise MissingSourceError(f"no binding for {key}", node=node.name)
    for node in g.nodes.values():
        if node.is_source:
            ev.bind(node.name, sources[source_key(node)])
    ev.run()
    if stats is not None:
        stats["peak_live"] = ev.peak_live
        stats["stored"] = {k: ev.values[v] for k, v in g.stores().items()}
    return {name: ev.values[name] for name in g.save_list}


# re-exported so callers can catch "any tensor-shape problem" in one place
SHAPE_ERRORS = (ShapeError, TensorIndexError, AxisError)
