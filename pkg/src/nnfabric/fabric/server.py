"""Asyncio fabric server.

Each registered model gets a FIFO queue, a scheduler task and a pool of
replicas.  Replicas run batches in worker threads so the event loop keeps
accepting connections while a forward pass is in flight.
"""
from __future__ import annotations

import asyncio
import itertools
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor

from ..errors import DecodeError, FrameTooLarge, NNFabricError, TransportError
from ..modules import build_toy_lm
from ..wire import error_response, graph_from_obj, parse_invocations, read_frame_async, write_frame_async
from .config import ServerConfig
from .engine import TraceJob, execute_batch
from .scheduler import PendingRequest, next_deadline, schedule
from .sessions import SessionStore

log = logging.getLogger("nnfabric.fabric")


def log_event(event: str, **fields) -> None:
    log.info(json.dumps({"event": event, **fields}, sort_keys=True, default=str))


class ModelWorker:
    def __init__(self, model_id: str, entry, server: "FabricServer"):
        self.model_id = model_id
        self.entry = entry
        self.server = server
        self.replicas = [build_toy_lm(entry.config) for _ in range(entry.replicas)]
        self.pending: list[PendingRequest] = []
        self._wakeup = asyncio.Event()
        self._free: asyncio.Queue = asyncio.Queue()
        for i in range(len(self.replicas)):
            self._free.put_nowait(i)
        self._task = None
        self._running: set = set()

    def start(self):
        self._task = asyncio.get_running_loop().create_task(self._loop())

    async def stop(self):
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        for fut in [r.reply for r in self.pending]:
            if not fut.done():
                fut.set_result(error_response("shutdown", "server is shutting down"))
        self.pending.clear()

    def submit(self, job: TraceJob) -> asyncio.Future:
        loop = asyncio.get_running_loop()
        fut = loop.create_future()
        self.pending.append(PendingRequest(job.request_id, self.model_id, job.invocations, loop.time(),
                                           job.session_id, job, fut))
        self._wakeup.set()
        return fut

    async def _loop(self):
        loop = asyncio.get_running_loop()
        cfg = self.server.config
        while True:
            plan = schedule(self.pending, loop.time(), cfg.window_ms, cfg.max_batch_rows)
            if plan is None:
                deadline = next_deadline(self.pending, cfg.window_ms)
                timeout = None if deadline is None else max(0.0, deadline - loop.time())
                self._wakeup.clear()
                try:
                    await asyncio.wait_for(self._wakeup.wait(), timeout)
                except asyncio.TimeoutError:
                    pass
                continue
            ids = set(plan.members)
            members = [r for r in self.pending if r.request_id in ids]
            self.pending = [r for r in self.pending if r.request_id not in ids]
            idx = await self._free.get()
            task = loop.create_task(self._run(idx, members, plan.rows))
            self._running.add(task)
            task.add_done_callback(self._running.discard)

    async def _run(self, idx: int, members: list, rows: int):
        loop = asyncio.get_running_loop()
        started = loop.time()
        replica = self.replicas[idx]
        jobs = [m.payload for m in members]
        try:
            responses = await loop.run_in_executor(self.server.executor, execute_batch, replica, jobs,
                                                   self.server.sessions)
        except Exception as e:  # noqa: BLE001
            log.exception("replica %s/%d crashed", self.model_id, idx)
            responses = [error_response("internal", f"{type(e).__name__}: {e}") for _ in jobs]
        exec_ms = (loop.time() - started) * 1000.0
        if any(r.get("kind") == "internal" for r in responses):
            # a bug may have left the replica in a bad state
            self.replicas[idx] = build_toy_lm(self.entry.config)
            log_event("replica_restarted", model_id=self.model_id, replica=idx)
        for m, resp in zip(members, responses):
            log_event("request", request_id=m.request_id, model_id=self.model_id,
                      queue_ms=round((started - m.arrival) * 1000.0, 3), exec_ms=round(exec_ms, 3),
                      batch_size=len(members), batch_rows=rows, status=resp.get("status"))
            if not m.reply.done():
                m.reply.set_result(resp)
        self._free.put_nowait(idx)


class FabricServer:
    def __init__(self, config: ServerConfig, registry: dict, clock=time.monotonic):
        self.config = config
        self.registry = registry
        self.sessions = SessionStore(config.session_ttl_s, clock=clock)
        self.workers: dict[str, ModelWorker] = {}
        self.executor = None
        self.address = None
        self._server = None
        self._sweeper = None
        self._ids = itertools.count()
        self._closed = None

    async def start(self):
        self.executor = ThreadPoolExecutor(
            max_workers=max(1, sum(e.replicas for e in self.registry.values())),
            thread_name_prefix="replica")
        for model_id, entry in self.registry.items():
            worker = ModelWorker(model_id, entry, self)
            worker.start()
            self.workers[model_id] = worker
        self._server = await asyncio.start_server(self._handle, self.config.host, self.config.port)
        host, port = self._server.sockets[0].getsockname()[:2]
        self.address = f"{host}:{port}"
        self._closed = asyncio.Event()
        self._sweeper = asyncio.get_running_loop().create_task(self._sweep())
        log_event("listening", addr=self.address, models=sorted(self.workers))
        return self

    async def serve_until_closed(self):
        await self._closed.wait()

    async def close(self):
        if self._server is None:
            return
        self._server.close()
        await self._server.wait_closed()
        if self._sweeper is not None:
            self._sweeper.cancel()
        for w in self.workers.values():
            await w.stop()
        self.executor.shutdown(wait=True)
        self._server = None
        self._closed.set()
        log_event("stopped")

    async def _sweep(self):
        period = min(1.0, self.config.session_ttl_s / 2)
        while True:
            await asyncio.sleep(period)
            for sid in self.sessions.sweep():
                log_event("session_expired", session_id=sid)

    async def _handle(self, reader, writer):
        limit = self.config.max_frame_bytes
        try:
            while True:
                try:
                    msg = await read_frame_async(reader, limit)
                except (DecodeError, FrameTooLarge) as e:
                    await write_frame_async(writer, error_response("decode", e.message), limit)
                    break
                if msg is None:
                    break
                resp = await self.dispatch(msg)
                try:
                    await write_frame_async(writer, resp, limit)
                except FrameTooLarge as e:
                    await write_frame_async(writer, error_response("frame_too_large", e.message), limit)
        except (TransportError, ConnectionError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass

    async def dispatch(self, msg) -> dict:
        if not isinstance(msg, dict):
            return error_response("decode", "message must be a JSON object")
        kind = msg.get("type")
        try:
            if kind == "trace":
                return await self._trace(msg)
            if kind == "session_open":
                model_id = msg.get("model_id")
                if model_id not in self.workers:
                    return error_response("unknown_model", f"no model {model_id!r}")
                sid = self.sessions.open(model_id)
                log_event("session_opened", session_id=sid, model_id=model_id)
                return {"type": "session_opened", "session_id": sid}
            if kind == "session_close":
                sid = msg.get("session_id")
                self.sessions.close(sid)
                log_event("session_closed", session_id=sid)
                return {"type": "result", "status": "ok", "saved": {}}
            if kind == "model_list":
                return {"type": "model_listing", "models": {
                    mid: {**e.config.to_dict(), "replicas": e.replicas} for mid, e in self.registry.items()}}
        except NNFabricError as e:
            return error_response(e.kind, e.message, e.node)
        return error_response("bad_request", f"unknown message type {kind!r}")

    async def _trace(self, msg) -> dict:
        expected = {"type", "model_id", "session_id", "graph", "invocations"}
        if set(msg) != expected:
            return error_response("decode", f"trace request needs exactly {sorted(expected)}")
        graph = graph_from_obj(msg["graph"])
        invocations = parse_invocations(msg["invocations"])
        model_id, sid = msg["model_id"], msg["session_id"]
        worker = self.workers.get(model_id)
        if worker is None:
            return error_response("unknown_model", f"no model {model_id!r}")
        if sid is not None:
            self.sessions.get(sid)
        job = TraceJob(f"r{next(self._ids)}", model_id, graph, invocations, sid)
        return await worker.submit(job)


class ServerThread:
    """Run a FabricServer on a background event loop (tests, benchmarks)."""

    def __init__(self, config: ServerConfig, registry: dict, clock=time.monotonic):
        self.server = FabricServer(config, registry, clock)
        self._loop = None
        self._ready = threading.Event()
        self._error = None
        self._thread = threading.Thread(target=self._main, name="fabric-server", daemon=True)

    def _main(self):
        async def run():
            try:
                await self.server.start()
            except BaseException as e:  # noqa: BLE001
                self._error = e
                self._ready.set()
                return
            self._ready.set()
            await self.server.serve_until_closed()

        self._loop = asyncio.new_event_loop()
        try:
            self._loop.run_until_complete(run())
        finally:
            self._loop.close()

    def start(self, timeout: float = 10.0) -> "ServerThread":
        self._thread.start()
        if not self._ready.wait(timeout):
            raise TimeoutError("server did not start")
        if self._error is not None:
            raise self._error
        return self

    @property
    def address(self) -> str:
        return self.server.address

    def stop(self, timeout: float = 10.0) -> None:
        if self._loop is not None and self._thread.is_alive():
            fut = asyncio.run_coroutine_threadsafe(self.server.close(), self._loop)
            fut.result(timeout)
        self._thread.join(timeout)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False


def run_in_thread(config: ServerConfig, registry: dict, clock=time.monotonic) -> ServerThread:
    return ServerThread(config, registry, clock).start()


def serve(config: ServerConfig, registry: dict) -> None:
    """Serve until interrupted."""

    async def main():
        server = await FabricServer(config, registry).start()
        try:
            await server.serve_until_closed()
        finally:
            await server.close()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
