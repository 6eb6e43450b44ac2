import json
import logging
import socket
import struct
import threading

import numpy as np
import pytest

from nnfabric import Graph, LMConfig, build_toy_lm, scan, wrap
from nnfabric import tensor as T
from nnfabric.errors import (
    DecodeError,
    RemoteError,
    SessionExpired,
    Timeout,
    TransportError,
    UnknownSession,
    UnknownSessionValue,
    ValidationError,
)
from nnfabric.fabric import (
    ModelEntry,
    PendingRequest,
    ServerConfig,
    SessionStore,
    TraceJob,
    client_execute,
    execute_batch,
    list_models,
    merge_graphs,
    open_session,
    parse_registry,
    run_in_thread,
    schedule,
)
from nnfabric.fabric import client as fclient
from nnfabric.fabric import server as fserver
from nnfabric.graph import optimize
from nnfabric.tensor import bits_equal
from nnfabric.tracer import interleave_execute
from nnfabric.validator import validate
from nnfabric.wire import frame_bytes, read_frame, trace_request

from .conftest import TOY, random_prompt
from .graphgen import hook_sources, random_graph

OTHER = dict(TOY, n_layers=1, seed=7)


class FakeClock:
    def __init__(self):
        self.t = 1000.0

    def __call__(self):
        return self.t


class LogCollector(logging.Handler):
    def __init__(self):
        super().__init__()
        self.events = []
        self.guard = threading.Lock()

    def emit(self, record):
        try:
            ev = json.loads(record.getMessage())
        except ValueError:
            return
        with self.guard:
            self.events.append(ev)


@pytest.fixture(scope="module")
def clock():
    return FakeClock()


@pytest.fixture(scope="module")
def logs():
    h = LogCollector()
    lg = logging.getLogger("nnfabric.fabric")
    lg.addHandler(h)
    old = lg.level
    lg.setLevel(logging.INFO)
    yield h
    lg.removeHandler(h)
    lg.setLevel(old)


@pytest.fixture(scope="module")
def server(clock, logs):
    registry = {"toy": ModelEntry(LMConfig(**TOY), 1), "other": ModelEntry(LMConfig(**OTHER), 2)}
    cfg = ServerConfig(port=0, window_ms=150.0, max_batch_rows=8, session_ttl_s=60.0)
    srv = run_in_thread(cfg, registry, clock=clock)
    yield srv
    srv.stop()


@pytest.fixture(scope="module")
def endpoint(server):
    return server.address


@pytest.fixture
def remote_lm(endpoint, toy_cfg):
    return wrap(build_toy_lm(toy_cfg), model_id="toy", endpoint=endpoint)


def raw_exchange(endpoint, data, expect_close=True):
    host, port = fclient.parse_endpoint(endpoint)
    with socket.create_connection((host, port), timeout=5) as s:
        s.sendall(data)
        first = read_frame(s)
        rest = s.recv(1) if expect_close else None
    return first, rest


def solo(model, graph, invocations):
    """Local oracle for one tenant: validate, then execute alone."""
    issues = validate(graph, scan(model, [(1, len(p)) for p in invocations]))
    if issues:
        return ValidationError(issues)
    try:
        return interleave_execute(model, optimize(graph), invocations)[0]
    except Exception as e:  # noqa: BLE001
        return e


def random_tenant(rng, n_invokes=None):
    n_invokes = n_invokes or int(rng.integers(1, 3))
    invocations = [random_prompt(rng, 1, 10) for _ in range(n_invokes)]
    table = scan(build_toy_lm(LMConfig(**TOY)), [(1, len(p)) for p in invocations])
    g, _ = random_graph(rng, hook_sources(rng, table, k=3), n_ops=8, invalid_rate=0.1, save_rate=0.4)
    out = g.add_node("module_output", [], {"path": "", "invoke": 0, "call": 0})
    g.mark_saved(out)
    return g, invocations


def assert_same(got, want, tol=1e-5):
    assert got.keys() == want.keys()
    for k in want:
        np.testing.assert_allclose(got[k].data, want[k].data, rtol=tol, atol=tol, equal_nan=True, err_msg=k)


# ---------------------------------------------------------------------------
# scheduler (pure)
# ---------------------------------------------------------------------------


def req(i, rows=1, t=0.0, session=None):
    return PendingRequest(f"r{i}", "toy", [[1]] * rows, t, session)


def test_three_requests_within_window_wait_then_batch():
    q = [req(0, t=0.0), req(1, t=0.001), req(2, t=0.002)]
    assert schedule(q, 0.003, window_ms=10, max_batch_rows=8) is None
    plan = schedule(q, 0.0105, window_ms=10, max_batch_rows=8)
    assert plan.members == ["r0", "r1", "r2"] and plan.rows == 3


def test_single_request_dispatched_after_window():
    q = [req(0, t=5.0)]
    assert schedule(q, 5.009, 10, 8) is None
    assert schedule(q, 5.010, 10, 8).members == ["r0"]


def test_full_batch_dispatched_immediately():
    q = [req(0, rows=3), req(1, rows=4), req(2, rows=2)]
    plan = schedule(q, 0.0, 10, 8)
    assert plan.members == ["r0", "r1"] and plan.rows == 7
    assert plan.row_ranges == {"r0": (0, 3), "r1": (3, 7)}


def test_oversized_head_runs_alone():
    plan = schedule([req(0, rows=12), req(1)], 0.0, 10, 8)
    assert plan.members == ["r0"]


def test_session_requests_run_solo():
    q = [req(0, session="s"), req(1), req(2)]
    assert schedule(q, 0.0, 10, 8).members == ["r0"]
    q = [req(1), req(0, session="s"), req(2)]
    assert schedule(q, 1.0, 10, 8).members == ["r1"]


def test_plan_mask_and_padding():
    q = [PendingRequest("a", "toy", [[1, 2, 3]], 0.0), PendingRequest("b", "toy", [[1, 2, 3, 4, 5]], 0.0)]
    plan = schedule(q, 1.0, 10, 8)
    assert plan.seq_len == 5
    assert plan.mask.tolist() == [[True] * 3 + [False] * 2, [True] * 5]


# ---------------------------------------------------------------------------
# sessions (pure)
# ---------------------------------------------------------------------------


def test_session_store_ttl():
    clk = FakeClock()
    store = SessionStore(ttl_s=10, clock=clk)
    sid = store.open("toy")
    clk.t += 9
    store.get(sid)  # refreshes
    clk.t += 9
    assert store.get(sid).model_id == "toy"
    clk.t += 10.5
    with pytest.raises(SessionExpired):
        store.get(sid)
    with pytest.raises(UnknownSession):
        store.get("nope")


def test_sweep_and_bytes():
    clk = FakeClock()
    store = SessionStore(ttl_s=5, clock=clk)
    a, b = store.open("toy"), store.open("toy")
    store.get(a).values["x"] = T.zeros((4, 4))
    assert store.bytes_held(a) == 64 and store.total_bytes() == 64
    clk.t += 3
    store.get(b)
    clk.t += 3
    assert store.sweep() == [a]
    assert a not in store and b in store and store.bytes_held(a) == 0
    store.close(b)
    with pytest.raises(UnknownSession):
        store.close(b)


# ---------------------------------------------------------------------------
# engine (in-process)
# ---------------------------------------------------------------------------


def test_merge_namespaces_and_offsets():
    g = Graph()
    h = g.add_node("module_output", [], {"path": "embed", "invoke": 0, "call": 0})
    g.mark_saved(h)
    m = merge_graphs([g, g], [0, 3])
    assert list(m.nodes) == ["t0_module_output_0", "t1_module_output_0"]
    assert [n.attrs["invoke"] for n in m.nodes.values()] == [0, 3]


def test_invalid_tenant_does_not_block_valid_one(toy_cfg):
    model = build_toy_lm(toy_cfg)
    good = Graph()
    good.mark_saved(good.add_node("module_output", [], {"path": "", "invoke": 0, "call": 0}))
    bad = Graph()
    h = bad.add_node("module_output", [], {"path": "layers.0.mlp", "invoke": 0, "call": 0})
    w = bad.add_node("constant", [], {"value": T.zeros((8, 4))})
    bad.mark_saved(bad.add_node("matmul", [h, w]))
    jobs = [TraceJob("a", "toy", bad, [[1, 2]]), TraceJob("b", "toy", good, [[3, 4, 5]])]
    ra, rb = execute_batch(model, jobs)
    assert ra["kind"] == "validation" and ra["issues"][0]["kind"] == "shape-mismatch"
    assert rb["status"] == "ok" and list(rb["saved"]) == ["module_output_0"]


def test_runtime_failure_falls_back_to_solo(toy_cfg):
    model = build_toy_lm(toy_cfg)
    a = Graph()
    a.mark_saved(a.add_node("session_ref", [], {"name": "nothing"}))
    b = Graph()
    b.mark_saved(b.add_node("module_output", [], {"path": "ln_f", "invoke": 0, "call": 0}))
    ra, rb = execute_batch(model, [TraceJob("a", "toy", a, [[1]]), TraceJob("b", "toy", b, [[1, 2]])])
    assert ra["kind"] == "unknown_session_value"
    assert rb["status"] == "ok"


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------


def test_model_list(endpoint):
    models = list_models(endpoint)
    assert set(models) == {"toy", "other"}
    assert models["toy"] == {**TOY, "replicas": 1}
    assert models["other"]["n_layers"] == 1 and models["other"]["replicas"] == 2


def test_unknown_model(endpoint):
    g = Graph()
    g.mark_saved(g.add_node("module_output", [], {"path": "", "invoke": 0, "call": 0}))
    with pytest.raises(RemoteError) as e:
        client_execute(endpoint, "gpt-99", g, [[1]])
    assert e.value.kind == "unknown_model"


def test_malformed_frame_gets_error_then_close(endpoint):
    body = b"{this is not json"
    resp, rest = raw_exchange(endpoint, struct.pack(">I", len(body)) + body)
    assert resp["type"] == "error" and resp["kind"] == "decode"
    assert rest == b""


def test_oversized_frame_rejected(endpoint):
    resp, rest = raw_exchange(endpoint, struct.pack(">I", 2**31))
    assert resp["kind"] == "decode" and rest == b""


def test_unknown_message_type(endpoint):
    resp, _ = raw_exchange(endpoint, frame_bytes({"type": "exec_shell"}), expect_close=False)
    assert resp["kind"] == "bad_request"


def test_unknown_op_rejected_at_decode(endpoint):
    req = trace_request("toy", Graph(), [[1]])
    req["graph"]["nodes"] = [{"name": "exec_shell_0", "op": "exec_shell", "deps": [], "attrs": {}, "saved": True}]
    resp, _ = raw_exchange(endpoint, frame_bytes(req), expect_close=False)
    assert resp["kind"] == "decode"


def test_cross_tenant_name_reference_is_a_decode_error(endpoint):
    req = trace_request("toy", Graph(), [[1]])
    req["graph"]["nodes"] = [{"name": "relu_0", "op": "relu", "deps": ["t0_module_output_0"],
                              "attrs": {}, "saved": True}]
    with pytest.raises(DecodeError):
        fclient.raise_for_error(fclient.request(endpoint, req))


def test_remote_matches_local_bit_exact(remote_lm, toy_cfg):
    local = wrap(build_toy_lm(toy_cfg))
    results = []
    for lm, remote in ((local, False), (remote_lm, True)):
        with lm.trace(remote=remote) as tr:
            with tr.invoke([1, 2, 3]):
                h = lm.layers[0].mlp.output[0, -1, :]
            with tr.invoke([4, 5, 6, 7]):
                lm.layers[0].mlp.output[0, 0, :] = h
                out = lm.output.save()
                grad_free = lm.layers[1].attn.output.softmax(-1).save()
        results.append((out.value, grad_free.value))
    assert bits_equal(results[0][0], results[1][0])
    assert bits_equal(results[0][1], results[1][1])


def test_remote_gradients_match_local(remote_lm, toy_cfg):
    local = wrap(build_toy_lm(toy_cfg))
    vals = []
    for lm, remote in ((local, False), (remote_lm, True)):
        with lm.trace([3, 1, 4], remote=remote):
            lm.output.sum().backward()
            g = lm.layers[1].mlp.grad.save()
        vals.append(g.value)
    assert bits_equal(*vals)


def test_remote_validation_error(remote_lm):
    with pytest.raises(ValidationError) as e:
        with remote_lm.trace([1, 2, 3, 4, 5], remote=True):
            remote_lm.layers[0].mlp.output[:, :, [3, 5, 8]] = T.zeros((7,))
    assert [i.kind for i in e.value.issues] == ["shape-mismatch"]
    assert e.value.issues[0].node == "setitem_0"


def test_timeout_against_stalled_server():
    lst = socket.socket()
    lst.bind(("127.0.0.1", 0))
    lst.listen(1)
    port = lst.getsockname()[1]
    try:
        g = Graph()
        g.mark_saved(g.add_node("module_output", [], {"path": "", "invoke": 0, "call": 0}))
        with pytest.raises(Timeout):
            client_execute(f"127.0.0.1:{port}", "toy", g, [[1]], timeout=0.001)
    finally:
        lst.close()


def test_unreachable_endpoint():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(TransportError):
        list_models(f"127.0.0.1:{port}", timeout=1)


def test_cotenancy_matches_solo(endpoint, logs, toy_cfg):
    rng = np.random.default_rng(77)
    tenants = [random_tenant(rng, 1) for _ in range(8)]
    model = build_toy_lm(toy_cfg)
    want = [solo(model, g, inv) for g, inv in tenants]
    got = [None] * len(tenants)
    barrier = threading.Barrier(len(tenants))

    def client(i):
        g, inv = tenants[i]
        barrier.wait()
        try:
            got[i] = client_execute(endpoint, "toy", g, inv, timeout=30)
        except Exception as e:  # noqa: BLE001
            got[i] = e

    threads = [threading.Thread(target=client, args=(i,)) for i in range(len(tenants))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for (g, _), w, r in zip(tenants, want, got):
        if isinstance(w, Exception):
            assert type(r) is type(w) or isinstance(r, RemoteError), (w, r)
        else:
            assert not isinstance(r, Exception), r
            assert set(r) == set(g.save_list)
            assert_same(r, w)
    sizes = [e["batch_size"] for e in logs.events if e.get("event") == "request" and e["model_id"] == "toy"]
    assert max(sizes) > 1


@pytest.mark.parametrize("seed", range(3))
def test_isolation_fuzz(endpoint, seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 7))
    tenants = [random_tenant(rng) for _ in range(n)]
    got = [None] * n
    barrier = threading.Barrier(n)

    def client(i):
        barrier.wait()
        try:
            got[i] = client_execute(endpoint, "toy", *tenants[i], timeout=30)
        except Exception as e:  # noqa: BLE001
            got[i] = e

    threads = [threading.Thread(target=client, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for (g, _), r in zip(tenants, got):
        if not isinstance(r, Exception):
            assert set(r) <= set(g.save_list)
            assert set(r) == set(g.save_list)


def test_remote_session_matches_local(remote_lm, toy_cfg):
    local = wrap(build_toy_lm(toy_cfg))
    outs = []
    for lm, remote in ((local, False), (remote_lm, True)):
        with lm.session(remote=remote) as s:
            with lm.trace([3, 1, 4, 1, 5], remote=remote):
                s.save("h", lm.layers[1].output[0, 3, :])
            with lm.trace([9, 2, 6], remote=remote):
                lm.layers[1].output[0, 0, :] = s.ref("h")
                out = lm.output.save()
        outs.append(out.value)
    assert bits_equal(*outs)


def test_remote_session_values_stay_on_server(remote_lm, server):
    with remote_lm.session(remote=True) as s:
        with remote_lm.trace([1, 2, 3], remote=True) as tr:
            s.save("h", remote_lm.layers[0].output)
        assert tr.results == {}
        assert server.server.sessions.bytes_held(s.id) == 3 * 16 * 4
        sid = s.id
    assert server.server.sessions.bytes_held(sid) == 0
    assert sid not in server.server.sessions


def test_remote_session_expiry(endpoint, remote_lm, clock):
    sid = open_session(endpoint, "toy")
    with remote_lm.session(remote=True) as s:
        with remote_lm.trace([1, 2], remote=True):
            s.save("h", remote_lm.layers[0].output)
        clock.t += 61
        with pytest.raises(SessionExpired):
            with remote_lm.trace([1, 2], remote=True):
                s.ref("h").save()
        s.closed = True  # the server already dropped it
    fclient.close_session(endpoint, sid)


def test_unknown_remote_session(endpoint):
    g = Graph()
    g.mark_saved(g.add_node("session_ref", [], {"name": "x"}))
    with pytest.raises(UnknownSession):
        client_execute(endpoint, "toy", g, [[1]], session_id="feedface")


def test_unknown_session_value_remote(remote_lm):
    with remote_lm.session(remote=True) as s:
        with pytest.raises(UnknownSessionValue):
            with remote_lm.trace([1], remote=True):
                (s.ref("nothing") * 2).save()


def test_log_lines_have_required_fields(logs, endpoint):
    g = Graph()
    g.mark_saved(g.add_node("module_output", [], {"path": "", "invoke": 0, "call": 0}))
    client_execute(endpoint, "other", g, [[1, 2]])
    reqs = [e for e in logs.events if e.get("event") == "request" and e["model_id"] == "other"]
    assert reqs
    for key in ("request_id", "model_id", "queue_ms", "exec_ms", "batch_size"):
        assert key in reqs[-1]


def test_replica_restarts_after_internal_error(endpoint, server, monkeypatch):
    worker = server.server.workers["toy"]
    before = worker.replicas[0]

    def boom(*a, **k):
        raise RuntimeError("simulated replica crash")

    monkeypatch.setattr(fserver, "execute_batch", boom)
    g = Graph()
    g.mark_saved(g.add_node("module_output", [], {"path": "", "invoke": 0, "call": 0}))
    with pytest.raises(RemoteError) as e:
        client_execute(endpoint, "toy", g, [[1]])
    assert e.value.kind == "internal"
    monkeypatch.undo()
    assert worker.replicas[0] is not before
    assert set(client_execute(endpoint, "toy", g, [[1]])) == {"module_output_0"}


def test_registry_parsing():
    reg = parse_registry({"a": {**TOY, "replicas": 3}})
    assert reg["a"].replicas == 3 and reg["a"].config.d_model == 16
