"""Envoys: proxies-producing wrappers over a module tree."""
from __future__ import annotations

from . import tracer as _tracer
from .errors import PathError, TraceError
from .graph import HookPoint
from .modules import Module


class Envoy:
    """Wraps one module; child envoys are reachable as attributes or by index.

    Inside an active trace ``.input``, ``.output`` and ``.grad`` return
    proxies for the tensors that will flow through the module.  Assigning to
    ``.input`` or ``.output`` replaces the tensor for the current invoke.
    """

    _OWN = ("_module", "_path", "_children", "_root", "model_id", "endpoint")

    def __init__(self, module: Module, path: str = "", root: "Envoy | None" = None,
                 model_id: str | None = None, endpoint: str | None = None):
        object.__setattr__(self, "_module", module)
        object.__setattr__(self, "_path", path)
        object.__setattr__(self, "_root", self if root is None else root)
        object.__setattr__(self, "model_id", model_id)
        object.__setattr__(self, "endpoint", endpoint)
        children = {}
        for name, child in module.children.items():
            children[name] = Envoy(child, f"{path}.{name}" if path else name, self if root is None else root)
        object.__setattr__(self, "_children", children)

    @property
    def path(self) -> str:
        return self._path

    @property
    def module(self) -> Module:
        return self._module

    @property
    def children(self) -> dict:
        return dict(self._children)

    @property
    def root(self) -> "Envoy":
        return self._root

    def __getattr__(self, name):
        children = object.__getattribute__(self, "_children")
        if name in children:
            return children[name]
        raise AttributeError(f"envoy {self._path or '<root>'!r} has no child or attribute {name!r}")

    def __getitem__(self, key):
        try:
            return self._children[str(key)]
        except KeyError:
            raise PathError(f"{self._path or '<root>'} has no child {key!r}", prefix=self._path) from None

    def __iter__(self):
        return iter(self._children.values())

    def __len__(self):
        return len(self._children)

    def __dir__(self):
        return list(super().__dir__()) + list(self._children)

    def __repr__(self):
        return f"Envoy({self._path or '<root>'!r}, kind={self._module.kind})"

    # -- hook points -------------------------------------------------------

    def _hook(self, port: str, call: int = 0):
        trace = _tracer.current_trace()
        if trace is None:
            raise TraceError(f".{port} of {self._path or '<root>'!r} accessed outside a tracing context")
        if trace.root is not self._root:
            raise TraceError("envoy belongs to a different model than the active trace")
        return trace.hook(self._path, port, call)

    @property
    def input(self):
        return self._hook("input")

    @property
    def output(self):
        return self._hook("output")

    @property
    def grad(self):
        """Gradient of the backward loss with respect to this module's output."""
        return self._hook("grad_output")

    def __setattr__(self, name, value):
        if name in ("input", "output"):
            self._hook(name)[()] = value
        elif name == "grad":
            raise TraceError("gradients are read-only")
        else:
            object.__setattr__(self, name, value)

    def at_call(self, call: int) -> "CallView":
        """Hook points for the ``call``-th invocation of this module in one forward."""
        return CallView(self, call)

    # -- navigation --------------------------------------------------------

    def resolve(self, path: str) -> "Envoy":
        return resolve(self, path)

    def paths(self) -> list:
        out = [self._path]
        for child in self._children.values():
            out.extend(child.paths())
        return out

    # -- contexts ----------------------------------------------------------

    def trace(self, prompt=None, *, remote: bool = False, scan: bool = True,
              validate: bool = True, timeout: float = 30.0):
        from .tracer import Trace

        return Trace(self._root, prompt, remote=remote, scan=scan, validate=validate, timeout=timeout)

    def session(self, *, remote: bool = False, timeout: float = 30.0):
        from .tracer import Session

        return Session(self._root, remote=remote, timeout=timeout)


class CallView:
    def __init__(self, envoy: Envoy, call: int):
        self._envoy = envoy
        self._call = call

    @property
    def input(self):
        return self._envoy._hook("input", self._call)

    @property
    def output(self):
        return self._envoy._hook("output", self._call)

    @property
    def grad(self):
        return self._envoy._hook("grad_output", self._call)


def wrap(m: Module, model_id: str | None = None, endpoint: str | None = None) -> Envoy:
    """Wrap ``m`` (non-destructively) in an envoy tree mirroring its children."""
    if not m.path and any(c.path == "" for c in m.children.values()):
        m.assign_paths()
    return Envoy(m, "", None, model_id, endpoint)


def resolve(e: Envoy, path: str) -> Envoy:
    if not path:
        return e
    cur = e
    walked = []
    for part in path.split("."):
        children = object.__getattribute__(cur, "_children")
        if part not in children:
            prefix = ".".join(walked)
            raise PathError(f"no module at {path!r}; nearest valid prefix is {prefix!r}", prefix=prefix)
        cur = children[part]
        walked.append(part)
    return cur


def hookpoint(path: str, port: str, invoke: int = 0, call: int = 0) -> HookPoint:
    return HookPoint(path, port, invoke, call)
