"""Run one scheduled batch of trace requests on a model replica.

Non-session requests in a batch are merged into a single graph: node names get
a per-tenant prefix and hook invokes are offset by the tenant's first row, so
the whole batch costs one forward pass.  If the merged run fails, each request
is retried alone so one tenant's runtime error cannot fail its co-tenants.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

from ..errors import NNFabricError, ShapeError, ValidationError
from ..graph import HOOK_OPS, Graph, Node, optimize
from ..tracer import interleave_execute
from ..validator import ValidationIssue, scan, validate
from ..wire import error_response, result_response

log = logging.getLogger("nnfabric.fabric")


@dataclass
class TraceJob:
    request_id: str
    model_id: str
    graph: Graph
    invocations: list
    session_id: str | None = None


def tenant_prefix(i: int) -> str:
    return f"t{i}_"


def merge_graphs(graphs: list, row_offsets: list) -> Graph:
    """Disjoint union of ``graphs`` with names prefixed and invokes shifted."""
    merged = Graph()
    for i, (g, offset) in enumerate(zip(graphs, row_offsets)):
        pre = tenant_prefix(i)
        for n in g.nodes.values():
            attrs = dict(n.attrs)
            attrs.pop("store", None)
            if n.op in HOOK_OPS:
                attrs["invoke"] = attrs["invoke"] + offset
            merged.insert(Node(pre + n.name, n.op, [pre + d for d in n.deps], attrs, n.saved))
    return merged


def split_saved(saved: dict, n: int) -> list:
    out = [{} for _ in range(n)]
    for name, value in saved.items():
        i, _, rest = name.partition("_")
        out[int(i[1:])][rest] = value
    return out


def check_job(replica, job: TraceJob, session_shapes=None) -> list:
    """Validation issues for ``job`` against ``replica``."""
    try:
        table = scan(replica, [(1, len(p)) for p in job.invocations])
    except ShapeError as e:
        return [ValidationIssue("shape-mismatch", None, None, f"prompt rejected by the model: {e.message}")]
    return validate(job.graph, table, session_shapes)


def _error(e: Exception) -> dict:
    if isinstance(e, ValidationError):
        return error_response("validation", str(e), None, e.issues)
    if isinstance(e, NNFabricError):
        return error_response(e.kind, e.message, e.node)
    return error_response("internal", f"{type(e).__name__}: {e}")


def run_solo(replica, job: TraceJob, sessions=None) -> dict:
    try:
        if job.session_id is not None:
            rec = sessions.get(job.session_id)
            if rec.model_id != job.model_id:
                return error_response("bad_request",
                                      f"session {job.session_id} belongs to model {rec.model_id!r}")
            with rec.lock:
                shapes = {k: v.shape for k, v in rec.values.items()}
                issues = check_job(replica, job, shapes)
                if issues:
                    raise ValidationError(issues)
                saved, stored = interleave_execute(replica, optimize(job.graph), job.invocations, rec.values)
                rec.values.update(stored)
        else:
            issues = check_job(replica, job)
            if issues:
                raise ValidationError(issues)
            saved, _ = interleave_execute(replica, optimize(job.graph), job.invocations)
        return result_response(saved)
    except Exception as e:  # noqa: BLE001 - every failure becomes a response
        if not isinstance(e, NNFabricError):
            log.exception("internal error in request %s", job.request_id)
        return _error(e)


def execute_batch(replica, jobs: list, sessions=None) -> list:
    """One response dict per job, in order."""
    if len(jobs) == 1 or any(j.session_id is not None for j in jobs):
        return [run_solo(replica, j, sessions) for j in jobs]
    responses: list = [None] * len(jobs)
    runnable = []
    for i, job in enumerate(jobs):
        issues = check_job(replica, job)
        if issues:
            responses[i] = _error(ValidationError(issues))
        else:
            runnable.append(i)
    if len(runnable) == 1:
        responses[runnable[0]] = run_solo(replica, jobs[runnable[0]], sessions)
    elif runnable:
        offsets, invocations, graphs = [], [], []
        for i in runnable:
            offsets.append(len(invocations))
            invocations.extend(jobs[i].invocations)
            graphs.append(optimize(jobs[i].graph))
        try:
            saved, _ = interleave_execute(replica, merge_graphs(graphs, offsets), invocations)
        except Exception as e:  # noqa: BLE001
            log.debug("merged batch failed (%s); retrying members alone", e)
            for i in runnable:
                responses[i] = run_solo(replica, jobs[i], sessions)
        else:
            for i, part in zip(runnable, split_saved(saved, len(runnable))):
                responses[i] = result_response(part)
    return responses
