"""Server configuration and the model registry file."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..modules import LMConfig
from ..wire import DEFAULT_MAX_FRAME_BYTES


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 5555
    window_ms: float = 5.0
    max_batch_rows: int = 8
    max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES
    session_ttl_s: float = 300.0
    registry_path: str = "models.json"

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ServerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown server config keys {sorted(unknown)}")
        cfg = cls(**d)
        if not isinstance(cfg.port, int) or not 0 <= cfg.port < 65536:
            raise ConfigError(f"invalid port {cfg.port!r}")
        if cfg.max_batch_rows < 1 or cfg.window_ms < 0 or cfg.session_ttl_s <= 0 or cfg.max_frame_bytes < 16:
            raise ConfigError("window_ms, max_batch_rows, session_ttl_s and max_frame_bytes must be positive")
        if base_dir is not None and not Path(cfg.registry_path).is_absolute():
            cfg.registry_path = str(base_dir / cfg.registry_path)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModelEntry:
    config: LMConfig
    replicas: int = 1


def load_config(path) -> ServerConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("server config must be a JSON object")
    return ServerConfig.from_dict(raw, base_dir=path.parent)


def parse_registry(raw) -> dict:
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("registry must be a non-empty object of model_id -> config")
    out = {}
    for model_id, entry in raw.items():
        if not isinstance(entry, dict):
            raise ConfigError(f"registry entry {model_id!r} must be an object")
        entry = dict(entry)
        replicas = entry.pop("replicas", 1)
        if not isinstance(replicas, int) or isinstance(replicas, bool) or replicas < 1:
            raise ConfigError(f"replicas for {model_id!r} must be a positive integer")
        out[model_id] = ModelEntry(LMConfig.from_dict(entry), replicas)
    return out


def load_registry(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"registry file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"registry {path} is not valid JSON: {e}") from None
    return parse_registry(raw)
