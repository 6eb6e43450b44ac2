"""Remote execution fabric: wire server, scheduler, sessions and client."""
from .client import client_execute, close_session, list_models, open_session
from .config import ModelEntry, ServerConfig, load_config, load_registry, parse_registry
from .engine import TraceJob, execute_batch, merge_graphs
from .scheduler import BatchPlan, PendingRequest, schedule
from .server import FabricServer, ServerThread, run_in_thread, serve
from .sessions import SessionStore

__all__ = [
    "BatchPlan", "FabricServer", "ModelEntry", "PendingRequest", "ServerConfig", "ServerThread",
    "SessionStore", "TraceJob", "client_execute", "close_session", "execute_batch", "list_models",
    "load_config", "load_registry", "merge_graphs", "open_session", "parse_registry", "run_in_thread",
    "schedule", "serve",
]
