"""Co-tenant batch planning.

``schedule`` is a pure function of the queue and the clock so it can be tested
without a server.  Requests that use a session always run alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..modules import pad_batch


@dataclass
class PendingRequest:
    request_id: str
    model_id: str
    invocations: list
    arrival: float  # seconds, same clock as ``now``
    session_id: str | None = None
    payload: object = None
    reply: object = None

    @property
    def rows(self) -> int:
        return len(self.invocations)


@dataclass
class BatchPlan:
    members: list
    row_ranges: dict = field(default_factory=dict)  # request id -> (start, stop)
    seq_len: int = 0
    mask: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return sum(b - a for a, b in self.row_ranges.values())


def make_plan(requests: list) -> BatchPlan:
    ranges, start, prompts = {}, 0, []
    for r in requests:
        ranges[r.request_id] = (start, start + r.rows)
        start += r.rows
        prompts.extend(r.invocations)
    _, mask = pad_batch(prompts)
    return BatchPlan([r.request_id for r in requests], ranges, mask.shape[1], mask.data.astype(bool))


def schedule(pending: list, now: float, window_ms: float, max_batch_rows: int):
    """Next BatchPlan to dispatch, or None to keep waiting."""
    if not pending:
        return None
    head = pending[0]
    if head.session_id is not None:
        return make_plan([head])
    group, rows, available, closed = [], 0, 0, False
    for r in pending:
        if r.session_id is not None:
            break
        available += r.rows
        if closed:
            continue
        if not group or rows + r.rows <= max_batch_rows:
            group.append(r)
            rows += r.rows
        else:
            closed = True
    if available >= max_batch_rows or now >= next_deadline(pending, window_ms):
        return make_plan(group)
    return None


def next_deadline(pending: list, window_ms: float):
    """Clock time at which the head request's window closes (None if idle)."""
    if not pending:
        return None
    return pending[0].arrival + window_ms / 1000.0
