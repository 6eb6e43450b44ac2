"""Tracing contexts, proxies, sessions, and the interleaved executor.

Inside ``with lm.trace(...)`` every operation on a proxy appends a node to the
trace's graph instead of computing anything.  Leaving the context validates the
graph against the model's shapes, prunes it, and runs it alongside a single
batched forward pass (locally, or on a fabric server when ``remote=True``).
"""
from __future__ import annotations

import threading
import uuid

import numpy as np

from . import tensor as T
from .errors import (
    ExecutionError,
    MissingSourceError,
    NoInvocationError,
    SessionClosed,
    TraceError,
    UnknownSessionValue,
    ValidationError,
)
from .graph import OP_OF_PORT, PORT_OF_OP, Evaluator, Graph, optimize, replacement_families
from .modules import Module, forward, pad_batch
from .tensor import TensorValue
from .validator import scan, validate

_state = threading.local()


def current_trace():
    return getattr(_state, "trace", None)


def current_session():
    return getattr(_state, "session", None)


def _prompt(p) -> list:
    if type(p) is list and p and set(map(type, p)) == {int}:
        return list(p)
    if isinstance(p, TensorValue):
        p = p.data.reshape(-1).tolist()
    p = [int(x) for x in np.asarray(p).reshape(-1).tolist()]
    if not p:
        raise TraceError("a prompt needs at least one token")
    return p


# ---------------------------------------------------------------------------
# Proxy
# ---------------------------------------------------------------------------


class Proxy:
    """Placeholder for a tensor that exists only once the trace executes."""

    __slots__ = ("_trace", "_name", "_saved_as")

    def __init__(self, trace: "Trace", name: str):
        self._trace = trace
        self._name = name
        self._saved_as = None

    @property
    def node(self) -> str:
        return self._name

    @property
    def graph(self) -> Graph:
        return self._trace.graph

    def __repr__(self):
        node = self._trace.graph.nodes.get(self._name)
        op = node.op if node else "?"
        return f"Proxy({self._name}, op={op})"

    # -- results -----------------------------------------------------------

    def save(self) -> "Proxy":
        self._trace._check_open()
        self._trace.graph.mark_saved(self._name)
        self._saved_as = self._name
        return self

    @property
    def value(self) -> TensorValue:
        trace = self._trace
        if trace.state != "executed":
            raise TraceError("proxy values are only available after the trace executes")
        name = self._saved_as or self._name
        if name not in trace.results:
            raise TraceError(f"{name} was not saved; call .save() inside the trace")
        return trace.results[name]

    def backward(self) -> "Proxy":
        return self._trace._new("backward_marker", [self._name])

    # -- graph construction -----------------------------------------------

    def _lift(self, other) -> str:
        return self._trace._lift(other)

    def _bin(self, op, other, reverse=False):
        a, b = self._name, self._lift(other)
        if reverse:
            a, b = b, a
        return self._trace._new(op, [a, b])

    def __add__(self, o):
        return self._bin("add", o)

    def __radd__(self, o):
        return self._bin("add", o, True)

    def __sub__(self, o):
        return self._bin("sub", o)

    def __rsub__(self, o):
        return self._bin("sub", o, True)

    def __mul__(self, o):
        return self._bin("mul", o)

    def __rmul__(self, o):
        return self._bin("mul", o, True)

    def __truediv__(self, o):
        return self._bin("div", o)

    def __rtruediv__(self, o):
        return self._bin("div", o, True)

    def __matmul__(self, o):
        return self._bin("matmul", o)

    def __rmatmul__(self, o):
        return self._bin("matmul", o, True)

    def __neg__(self):
        return self._bin("mul", -1.0)

    def __getitem__(self, key):
        return self._trace._new("getitem", [self._name], {"index": _index_key(key)})

    def __setitem__(self, key, value):
        """Lowered to a functional setitem node that this proxy then refers to."""
        trace = self._trace
        old = self._name
        new = trace._new("setitem", [old, self._lift(value)], {"index": _index_key(key)})._name
        self._name = new
        trace._retarget(old, new)

    def sum(self, axis=None):
        return self._trace._new("sum", [self._name], {"axis": axis})

    def mean(self, axis=None):
        return self._trace._new("mean", [self._name], {"axis": axis})

    def argmax(self, axis=None):
        return self._trace._new("argmax", [self._name], {"axis": axis})

    def softmax(self, axis=-1):
        return self._trace._new("softmax", [self._name], {"axis": axis})

    def gelu(self):
        return self._trace._new("gelu", [self._name])

    def relu(self):
        return self._trace._new("relu", [self._name])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return self._trace._new("reshape", [self._name], {"shape": list(shape)})

    def __bool__(self):
        raise TraceError("a proxy has no value while tracing; branch on saved results instead")

    def __iter__(self):
        raise TraceError("proxies cannot be iterated while tracing")

    def __len__(self):
        raise TraceError("proxies have no length while tracing")


def _index_key(key):
    # x[[1, 2]] selects rows 1 and 2 on axis 0, as in numpy
    if isinstance(key, list):
        key = (key,)
    return T.normalize_index(key)


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------


class Invoke:
    def __init__(self, trace: "Trace", index: int):
        self.trace = trace
        self.index = index
        self._prev = None

    def __enter__(self):
        self._prev = self.trace._invoke
        self.trace._invoke = self.index
        return self

    def __exit__(self, *exc):
        self.trace._invoke = self._prev
        return False


class Trace:
    """One tracing scope over a wrapped model."""

    def __init__(self, root, prompt=None, *, remote=False, scan=True, validate=True,
                 timeout=30.0, session=None):
        self.root = root
        self.graph = Graph()
        self.invocations: list[list] = []
        self.options = {"remote": bool(remote), "scan": bool(scan or validate), "validate": bool(validate)}
        self.timeout = timeout
        self.session = session
        self.state = "new"
        self.results: dict = {}
        self.shapes = None
        self._prompt = prompt
        self._invoke = None
        self._memo: dict[tuple, Proxy] = {}  # (path, port, invoke, call)
        self._backward = None

    # -- lifecycle ---------------------------------------------------------

    def __enter__(self):
        if current_trace() is not None:
            raise TraceError("a trace is already open on this thread")
        if self.state != "new":
            raise TraceError("a trace object can only be entered once")
        if self.session is None:
            self.session = current_session()
        if self.session is not None:
            self.session._check_open()
        _state.trace = self
        self.state = "open"
        if self._prompt is not None:
            self.invocations.append(_prompt(self._prompt))
            self._invoke = 0
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.trace = None
        if exc_type is not None:
            self.state = "aborted"
            return False
        self.end()
        return False

    def invoke(self, prompt) -> Invoke:
        if self.state != "open":
            raise TraceError(f"cannot invoke on a trace that is {self.state}")
        self.invocations.append(_prompt(prompt))
        return Invoke(self, len(self.invocations) - 1)

    def end(self) -> dict:
        if self.state == "open" and current_trace() is self:
            _state.trace = None
        if self.state not in ("open",):
            raise TraceError(f"cannot execute a trace that is {self.state}")
        if not self.invocations:
            self.state = "aborted"
            raise NoInvocationError("trace has no prompt and no invoke")
        try:
            if self.options["remote"]:
                self.results = self._run_remote()
            else:
                self.results = self._run_local()
        except BaseException:
            self.state = "failed"
            raise
        self.state = "executed"
        return self.results

    def _run_local(self) -> dict:
        model = self.root.module
        store = self.session.store if self.session is not None else {}
        if self.options["scan"]:
            self.shapes = scan(model, [(1, len(p)) for p in self.invocations])
        if self.options["validate"]:
            session_shapes = {k: v.shape for k, v in store.items()}
            issues = validate(self.graph, self.shapes, session_shapes)
            if issues:
                raise ValidationError(issues)
        saved, stored = interleave_execute(model, optimize(self.graph), self.invocations, store)
        if self.session is not None:
            self.session._absorb(stored)
        return saved

    def _run_remote(self) -> dict:
        from .fabric.client import client_execute

        root = self.root
        if root.model_id is None or root.endpoint is None:
            raise TraceError("remote tracing needs wrap(..., model_id=..., endpoint=...)")
        session_id = None
        if self.session is not None:
            if not self.session.remote:
                raise TraceError("a remote trace cannot run inside a local session")
            session_id = self.session.id
        return client_execute(root.endpoint, root.model_id, self.graph, self.invocations,
                              session_id=session_id, timeout=self.timeout)

    def _check_open(self):
        if self.state != "open":
            raise TraceError(f"trace is {self.state}; graph can no longer change")

    # -- graph construction -------------------------------------------------

    def _new(self, op, deps, attrs=None) -> Proxy:
        self._check_open()
        if op == "backward_marker":
            if self._backward is not None:
                raise TraceError("only one backward() per trace; use a session for more")
        name = self.graph.add_node(op, deps, attrs)
        if op == "backward_marker":
            self._backward = name
        return Proxy(self, name)

    def _lift(self, value) -> str:
        if isinstance(value, Proxy):
            if value._trace is not self:
                raise TraceError("proxy belongs to a different trace")
            return value._name
        return self._new("constant", [], {"value": T.as_tensor(value)})._name

    def hook(self, path: str, port: str, call: int = 0) -> Proxy:
        self._check_open()
        if self._invoke is None:
            raise TraceError("module hooks must be accessed inside an invoke (or a trace given a prompt)")
        key = (path, port, self._invoke, call)
        proxy = self._memo.get(key)
        if proxy is None:
            if port not in OP_OF_PORT:
                raise TraceError(f"unknown hook port {port!r}")
            proxy = self._new(OP_OF_PORT[port], [], {"path": path, "invoke": self._invoke, "call": call})
            self._memo[key] = proxy
        return proxy

    def _retarget(self, old: str, new: str) -> None:
        for proxy in self._memo.values():
            if proxy._name == old:
                proxy._name = new


def trace_begin(envoy, prompt=None, **options) -> Trace:
    return envoy.trace(prompt, **options).__enter__()


def trace_end(t: Trace) -> dict:
    return t.end()


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


class Session:
    """Values stored here outlive the trace that produced them."""

    def __init__(self, root, *, remote=False, timeout=30.0):
        self.root = root
        self.remote = bool(remote)
        self.timeout = timeout
        self.id = None
        self.store: dict[str, TensorValue] = {}
        self.closed = False
        self.owner = "fabric" if remote else "local"
        if not remote:
            self.id = f"local-{uuid.uuid4().hex[:12]}"

    def __enter__(self):
        if current_session() is not None:
            raise TraceError("a session is already open on this thread")
        if self.remote and self.id is None:
            from .fabric.client import open_session

            self.id = open_session(self.root.endpoint, self.root.model_id, timeout=self.timeout)
        _state.session = self
        return self

    def __exit__(self, *exc):
        if current_session() is self:
            _state.session = None
        self.end()
        return False

    def _check_open(self):
        if self.closed:
            raise SessionClosed(f"session {self.id} is closed")

    def save(self, name: str, proxy: Proxy) -> Proxy:
        """Keep ``proxy``'s executed value under ``name`` for later traces."""
        self._check_open()
        if not isinstance(proxy, Proxy):
            raise TraceError("session.save expects a proxy")
        trace = proxy._trace
        trace._check_open()
        node = trace.graph.nodes[proxy._name]
        target = proxy
        if "store" in node.attrs and node.attrs["store"] != name:
            target = trace._new("getitem", [proxy._name], {"index": ()})
        trace.graph.nodes[target._name].attrs["store"] = name
        return target

    def ref(self, name: str) -> Proxy:
        """Proxy for a stored value, resolved when the current trace runs."""
        self._check_open()
        trace = current_trace()
        if trace is None:
            raise TraceError("session.ref must be called inside a trace")
        return trace._new("session_ref", [], {"name": name})

    def _absorb(self, stored: dict) -> None:
        self.store.update(stored)

    def end(self) -> None:
        if self.closed:
            return
        if self.remote and self.id is not None:
            from .fabric.client import close_session

            close_session(self.root.endpoint, self.id, timeout=self.timeout)
        self.store.clear()
        self.closed = True


def session_begin(envoy, **options) -> Session:
    return envoy.session(**options).__enter__()


def session_end(s: Session) -> None:
    s.__exit__(None, None, None)


# ---------------------------------------------------------------------------
# Interleaved execution
# ---------------------------------------------------------------------------


class _Interleaver:
    """Forward hook handler that feeds the graph at module boundaries."""

    def __init__(self, graph: Graph, ev: Evaluator, lengths: list, grad_mode: bool):
        self.graph = graph
        self.ev = ev
        self.lengths = lengths
        self.grad_mode = grad_mode
        self.events: dict[tuple, list] = {}
        self.grad_keys: set = set()
        self.captured: dict[tuple, TensorValue] = {}
        self.families = replacement_families(graph)
        self.linear: dict[str, bool] = {}
        batch = len(lengths)
        for node in graph.nodes.values():
            if node.op in ("module_input", "module_output"):
                a = node.attrs
                if a["invoke"] < batch:
                    self.events.setdefault((a["path"], PORT_OF_OP[node.op], a["call"]), []).append(node)
            elif node.op == "module_grad_output":
                self.grad_keys.add((node.attrs["path"], "output", node.attrs["call"]))
        for src, members in self.families.items():
            chain = [src] + members
            linear = all(graph.nodes[m].deps[0] == prev for prev, m in zip(chain, members))
            self.linear[src] = linear
            if linear:
                ev.pin(members[-1])
            else:
                ev.pin(src)
                for m in members:
                    ev.pin(graph.nodes[m].deps[1])

    def rows(self, x: TensorValue, k: int) -> TensorValue:
        if not self.grad_mode:
            # a read-only view is safe because tensor values are immutable
            if x.ndim >= 2:
                return TensorValue._wrap(x.data[k:k + 1, : self.lengths[k]])
            return TensorValue._wrap(x.data[k:k + 1])
        if x.ndim >= 2:
            return T.index_get(x, [slice(k, k + 1), slice(0, self.lengths[k])])
        return T.index_get(x, [slice(k, k + 1)])

    def write_rows(self, x: TensorValue, k: int, value: TensorValue) -> TensorValue:
        if x.ndim >= 2:
            return T.index_set(x, [slice(k, k + 1), slice(0, self.lengths[k])], value)
        return T.index_set(x, [slice(k, k + 1)], value)

    def on_input(self, path, call, x):
        return self._event((path, "input", call), x)

    def on_output(self, path, call, x):
        if self.grad_mode and not x.requires_grad:
            x = x.as_leaf()
        x = self._event((path, "output", call), x)
        key = (path, "output", call)
        if key in self.grad_keys:
            self.captured[key] = x
        return x

    def _event(self, key, x):
        sources = self.events.get(key)
        if not sources:
            return x
        ev = self.ev
        for node in sources:
            ev.bind(node.name, self.rows(x, node.attrs["invoke"]))
        ev.run()
        for node in sources:
            members = self.families.get(node.name)
            if members:
                x = self.write_rows(x, node.attrs["invoke"], self._replacement(node.name, members))
        return x

    def _replacement(self, src: str, members: list) -> TensorValue:
        ev, nodes = self.ev, self.graph.nodes
        if self.linear[src]:
            last = members[-1]
            if last not in ev.done:
                raise ExecutionError(
                    f"replacement for {src} needs values that are not available yet", node=last)
            value = ev.values[last]
            ev.unpin(last)
            return value
        value = ev.values[src]
        for m in members:
            node = nodes[m]
            if node.deps[1] not in ev.done:
                raise ExecutionError(f"replacement for {src} needs values that are not available yet", node=m)
            value = T.index_set(value, node.attrs["index"], ev.values[node.deps[1]])
        ev.unpin(src)
        for m in members:
            ev.unpin(nodes[m].deps[1])
        return value


def interleave_execute(model: Module, graph: Graph, invocations: list, session_store: dict | None = None):
    """Run one batched forward of ``model`` with ``graph`` hooked into it.

    Returns (saved values, session values to store).
    """
    session_store = session_store if session_store is not None else {}
    invocations = [_prompt(p) for p in invocations]
    if not invocations:
        raise NoInvocationError("nothing to execute")
    keep = set(graph.save_list) | set(graph.stores().values())
    markers = [n.name for n in graph.nodes.values() if n.op == "backward_marker"]
    grad_nodes = [n for n in graph.nodes.values() if n.op == "module_grad_output"]
    if grad_nodes and not markers:
        raise ExecutionError("gradient requested without a backward loss", node=grad_nodes[0].name)
    grad_mode = bool(grad_nodes)
    ev = Evaluator(graph, keep | set(markers))
    lengths = [len(p) for p in invocations]
    hooks = _Interleaver(graph, ev, lengths, grad_mode)

    for node in graph.nodes.values():
        if node.op == "session_ref":
            name = node.attrs["name"]
            if name not in session_store:
                raise UnknownSessionValue(f"no session value named {name!r}", node=node.name)
            ev.bind(node.name, session_store[name])

    tokens, mask = pad_batch(invocations)
    grads = {}
    if grad_mode:
        with T.Tape() as tape:
            ev.run()
            forward(model, tokens, mask, hooks)
            _check_forward_sources(graph, ev)
            losses = []
            for m in markers:
                if m not in ev.done:
                    raise ExecutionError("backward loss was not computed during the forward pass", node=m)
                losses.append(ev.values[m])
            total = losses[0]
            for extra in losses[1:]:
                total = T.add(total, extra)
            if not total.requires_grad:
                # loss does not depend on the model; every gradient is zero
                grads = {}
            else:
                grads = T.backward(total, tape)
    else:
        ev.run()
        forward(model, tokens, mask, hooks)
        _check_forward_sources(graph, ev)

    with T.no_tape():
        for node in grad_nodes:
            key = (node.attrs["path"], "output", node.attrs["call"])
            out = hooks.captured.get(key)
            k = node.attrs["invoke"]
            if out is None or k >= len(invocations):
                raise MissingSourceError(f"hook {key} never fired for invoke {k}", node=node.name)
            g = grads.get(out)
            if g is None:
                g = T.zeros(out.shape)
            ev.bind(node.name, hooks.rows(g, k))
        ev.run()
    pending = ev.pending()
    if pending:
        raise MissingSourceError("graph could not be fully evaluated", node=pending[0])
    saved = {name: ev.values[name] for name in graph.save_list}
    stored = {k: ev.values[v] for k, v in graph.stores().items()}
    return saved, stored


def _check_forward_sources(graph: Graph, ev: Evaluator) -> None:
    for node in graph.nodes.values():
        if node.op in ("module_input", "module_output") and node.name not in ev.done:
            hp = node.hookpoint()
            raise MissingSourceError(
                f"{hp.port} of {hp.path!r} never fired (invoke {hp.invoke}, call {hp.call})", node=node.name)

