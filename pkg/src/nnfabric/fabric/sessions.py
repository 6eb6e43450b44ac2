"""Server-side session state with idle expiry."""
from __future__ import annotations

import secrets
import threading
import time
from dataclasses import dataclass, field

from ..errors import SessionExpired, UnknownSession


@dataclass
class SessionRecord:
    session_id: str
    model_id: str
    last_used: float
    values: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def bytes_held(self) -> int:
        return sum(v.data.nbytes for v in self.values.values())


class SessionStore:
    """Sessions keyed by id.  Expired ids are remembered so clients get a
    ``session_expired`` error rather than ``unknown_session``."""

    def __init__(self, ttl_s: float = 300.0, clock=time.monotonic, max_tombstones: int = 10_000):
        self.ttl_s = ttl_s
        self.clock = clock
        self._records: dict[str, SessionRecord] = {}
        self._tombstones: dict[str, None] = {}
        self._max_tombstones = max_tombstones
        self._lock = threading.Lock()

    def open(self, model_id: str) -> str:
        sid = secrets.token_hex(12)
        with self._lock:
            self._records[sid] = SessionRecord(sid, model_id, self.clock())
        return sid

    def get(self, session_id: str) -> SessionRecord:
        """Look up a live session and refresh its idle timer."""
        now = self.clock()
        with self._lock:
            rec = self._records.get(session_id)
            if rec is not None and now - rec.last_used > self.ttl_s:
                self._expire(session_id)
                rec = None
            if rec is None:
                if session_id in self._tombstones:
                    raise SessionExpired(f"session {session_id} expired after {self.ttl_s:g}s idle")
                raise UnknownSession(f"no session {session_id!r}")
            rec.last_used = now
            return rec

    def close(self, session_id: str) -> None:
        with self._lock:
            if self._records.pop(session_id, None) is None:
                if session_id in self._tombstones:
                    raise SessionExpired(f"session {session_id} already expired")
                raise UnknownSession(f"no session {session_id!r}")

    def sweep(self) -> list:
        """Drop every idle session; returns the expired ids."""
        now = self.clock()
        with self._lock:
            dead = [sid for sid, r in self._records.items() if now - r.last_used > self.ttl_s]
            for sid in dead:
                self._expire(sid)
        return dead

    def _expire(self, sid: str) -> None:
        self._records.pop(sid, None)
        self._tombstones[sid] = None
        while len(self._tombstones) > self._max_tombstones:
            self._tombstones.pop(next(iter(self._tombstones)))

    def bytes_held(self, session_id: str) -> int:
        with self._lock:
            rec = self._records.get(session_id)
        return 0 if rec is None else rec.bytes_held()

    def total_bytes(self) -> int:
        with self._lock:
            recs = list(self._records.values())
        return sum(r.bytes_held() for r in recs)

    def __len__(self):
        return len(self._records)

    def __contains__(self, session_id):
        return session_id in self._records
