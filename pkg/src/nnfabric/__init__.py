"""Deferred intervention graphs over neural modules, executed locally or on a shared server."""
from .envoy import Envoy, resolve, wrap
from .errors import *  # noqa: F401,F403
from .graph import Graph, HookPoint, Node, eliminate_dead, execute_pure, optimize, topological_order
from .modules import LMConfig, Module, build_toy_lm, forward, named_paths, pad_batch
from .tensor import TensorValue, as_tensor
from .tracer import Proxy, Session, Trace, interleave_execute
from .validator import ShapeSpec, ShapeTable, ValidationIssue, scan, validate

__version__ = "0.1.0"
