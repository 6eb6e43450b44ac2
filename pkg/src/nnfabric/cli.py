"""Command line entry points: serve, run, graph, bench.

Exit codes: 0 ok, 1 other runtime failure, 2 validation or decode error,
3 transport error, 4 usage error.
"""
from __future__ import annotations

import argparse
import gc
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .envoy import wrap
from .errors import (
    ConfigError,
    DecodeError,
    NNFabricError,
    TransportError,
    ValidationError,
)
from .graph import Graph, optimize
from .modules import LMConfig, build_toy_lm, forward, pad_batch
from .tracer import interleave_execute
from .validator import ValidationIssue, scan, validate
from .wire import decode_graph

EXIT_OK, EXIT_FAIL, EXIT_VALIDATION, EXIT_TRANSPORT, EXIT_USAGE = 0, 1, 2, 3, 4

# Used when no registry file is present so ``run`` and ``bench`` work out of the box.
BUILTIN_MODELS = {
    "toy": LMConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2, max_seq_len=16, seed=42),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_input(text: str) -> list:
    """``"1,2,3;4,5"`` -> ``[[1, 2, 3], [4, 5]]``."""
    invocations = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            raise UsageError(f"empty invoke in --input {text!r}")
        try:
            ids = [int(tok) for tok in part.split(",")]
        except ValueError:
            raise UsageError(f"--input must be comma-separated integers, got {part!r}") from None
        if any(t < 0 for t in ids):
            raise UsageError("token ids must be non-negative")
        invocations.append(ids)
    return invocations


def model_config(model_id: str, registry_path: str | None) -> LMConfig:
    from .fabric.config import load_registry

    if registry_path is not None and Path(registry_path).exists():
        registry = load_registry(registry_path)
        if model_id in registry:
            return registry[model_id].config
    if model_id in BUILTIN_MODELS:
        return BUILTIN_MODELS[model_id]
    raise UsageError(f"unknown model {model_id!r}")


def format_tensor(name: str, t: T.TensorValue) -> str:
    values = " ".join(str(np.float32(v)) for v in t.data.reshape(-1))
    return f"{name} shape={list(t.shape)}\n{values}"


def _print_issues(issues):
    for issue in issues:
        print(str(issue), file=sys.stderr)


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def cmd_serve(args) -> int:
    from .fabric.config import load_config, load_registry
    from .fabric.server import serve

    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config)
        if args.port is not None:
            config.port = args.port
        registry = load_registry(config.registry_path)
    except ConfigError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return EXIT_FAIL
    try:
        serve(config, registry)
    except OSError as e:
        print(f"error: cannot listen on {config.host}:{config.port}: {e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def run_local(cfg: LMConfig, graph: Graph, invocations: list) -> dict:
    model = build_toy_lm(cfg)
    table = scan(model, [(1, len(p)) for p in invocations])
    issues = validate(graph, table)
    if issues:
        raise ValidationError(issues)
    saved, _ = interleave_execute(model, optimize(graph), invocations)
    return saved


def cmd_run(args) -> int:
    from .fabric.client import client_execute

    invocations = parse_input(args.input)
    try:
        graph = decode_graph(Path(args.graph).read_bytes())
    except OSError as e:
        raise UsageError(f"cannot read graph: {e}") from None
    if args.session is not None and args.remote is None:
        raise UsageError("--session needs --remote")
    if args.remote is not None:
        saved = client_execute(args.remote, args.model, graph, invocations,
                               session_id=args.session, timeout=args.timeout)
    else:
        saved = run_local(model_config(args.model, args.registry), graph, invocations)
    for name in graph.save_list:
        if name in saved:
            print(format_tensor(name, saved[name]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


def graph_summary(g: Graph) -> str:
    lines = [f"{len(g)} nodes"]
    for n in g.nodes.values():
        deps = ",".join(n.deps) or "-"
        lines.append(f"{n.name}\t{n.op}\tdeps={deps}\tsaved={'yes' if n.saved else 'no'}")
    return "\n".join(lines)


def graph_dot(g: Graph) -> str:
    lines = ["digraph intervention {"]
    for n in g.nodes.values():
        label = f"{n.name}\\n{n.op}"
        if "path" in n.attrs:
            label += f"\\n{n.attrs['path']}"
        shape = "doublecircle" if n.saved else "ellipse"
        lines.append(f'  "{n.name}" [label="{label}", shape={shape}];')
    for n in g.nodes.values():
        for d in n.deps:
            lines.append(f'  "{d}" -> "{n.name}";')
    lines.append("}")
    return "\n".join(lines)


def cmd_graph(args) -> int:
    try:
        g = decode_graph(Path(args.graph).read_bytes())
    except OSError as e:
        raise UsageError(f"cannot read graph: {e}") from None
    print(graph_summary(g) if args.format == "summary" else graph_dot(g))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_MODES = ("baseline", "empty-trace", "act-patch", "attr-patch")


def bench_prompts(cfg: LMConfig, batch: int, seq: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    return rng.integers(1, cfg.vocab_size, size=(batch, seq)).tolist()


def bench_step(mode: str, lm, prompts: list, layer: int):
    """One timed unit of work for ``mode``."""
    if mode == "baseline":
        tokens, mask = pad_batch(prompts)
        forward(lm.module, tokens, mask)
        return
    if mode == "empty-trace":
        with lm.trace() as tr:
            for p in prompts:
                with tr.invoke(p):
                    lm.output.save()
        return
    half = len(prompts) // 2
    if mode == "act-patch":
        # clean rows donate one MLP output to the matching corrupted rows
        with lm.trace() as tr:
            clean = []
            for p in prompts[:half]:
                with tr.invoke(p):
                    clean.append(lm.layers[layer].mlp.output)
            for k, p in enumerate(prompts[half:]):
                with tr.invoke(p):
                    if k < len(clean) and len(p) == len(prompts[k]):
                        lm.layers[layer].mlp.output = clean[k]
                    lm.output.save()
        return
    if mode == "attr-patch":
        n_layers = len(lm.layers)
        with lm.trace() as tr:
            loss = None
            for p in prompts:
                with tr.invoke(p):
                    for i in range(n_layers):
                        lm.layers[i].mlp.output.save()
                        lm.layers[i].mlp.grad.save()
                    term = lm.output[:, -1, :].sum()
                    loss = term if loss is None else loss + term
            loss.backward()
        return
    raise UsageError(f"unknown bench mode {mode!r}")


def summarize(mode: str, times: list) -> dict:
    arr = np.asarray(times)
    return {
        "mode": mode,
        "median_s": float(np.median(arr)),
        "p10_s": float(np.percentile(arr, 10)),
        "p90_s": float(np.percentile(arr, 90)),
        "mean_s": float(arr.mean()),
        "std_s": float(statistics.pstdev(times)) if len(times) > 1 else 0.0,
    }


def bench_round(modes, lm, prompts: list, iters: int, layer: int = 0) -> dict:
    """Time ``iters`` steps of every mode, alternating modes step by step.

    Alternation gives each mode the same machine state (caches, frequency
    drift), so ratios between modes are paired measurements.
    """
    times = {m: [] for m in modes}
    # like timeit: keep cyclic GC pauses out of the measurement
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(iters):
            for m in modes:
                t0 = time.perf_counter()
                bench_step(m, lm, prompts, layer)
                times[m].append(time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return times


def bench_mode(mode: str, lm, prompts: list, iters: int, warmup: int, layer: int = 0) -> dict:
    for _ in range(warmup):
        bench_step(mode, lm, prompts, layer)
    return summarize(mode, bench_round([mode], lm, prompts, iters, layer)[mode])


BENCH_COLUMNS = ("mode", "median_s", "p10_s", "p90_s", "mean_s", "std_s")


def format_bench(rows: list) -> str:
    out = ["\t".join(BENCH_COLUMNS)]
    for r in rows:
        out.append("\t".join([r["mode"]] + [f"{r[c]:.6e}" for c in BENCH_COLUMNS[1:]]))
    return "\n".join(out)


def cmd_bench(args) -> int:
    cfg = model_config(args.model, args.registry)
    if args.batch < 2:
        raise UsageError("--batch must be at least 2")
    if args.iters < 1 or args.warmup < 0:
        raise UsageError("--iters must be positive and --warmup non-negative")
    seq = args.seq if args.seq is not None else cfg.max_seq_len
    if not 1 <= seq <= cfg.max_seq_len:
        raise UsageError(f"--seq must be in [1, {cfg.max_seq_len}]")
    modes = BENCH_MODES if args.mode in (None, ["all"]) else args.mode
    lm = wrap(build_toy_lm(cfg))
    prompts = bench_prompts(cfg, args.batch, seq, args.seed)
    per_mode = {m: [] for m in modes}
    rounds = max(1, args.rounds)
    for m in modes:
        for _ in range(args.warmup):
            bench_step(m, lm, prompts, args.layer)
    for _ in range(rounds):
        times = bench_round(modes, lm, prompts, max(1, args.iters // rounds), args.layer)
        for m in modes:
            per_mode[m].append(summarize(m, times[m]))
    rows = []
    for m in modes:
        rows.append(_combine(per_mode[m]))
    print(format_bench(rows))
    return EXIT_OK


def _combine(results: list) -> dict:
    if len(results) == 1:
        return results[0]
    # pool per-round summaries by their medians
    meds = [r["median_s"] for r in results]
    return {
        "mode": results[0]["mode"],
        "median_s": float(np.median(meds)),
        "p10_s": float(np.median([r["p10_s"] for r in results])),
        "p90_s": float(np.median([r["p90_s"] for r in results])),
        "mean_s": float(np.mean([r["mean_s"] for r in results])),
        "std_s": float(np.mean([r["std_s"] for r in results])),
    }


def parse_bench(text: str) -> dict:
    """Inverse of the bench TSV output: mode -> row dict."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split("\t")
    if tuple(header) != BENCH_COLUMNS:
        raise ValueError(f"unexpected bench header {header}")
    rows = {}
    for ln in lines[1:]:
        parts = ln.split("\t")
        rows[parts[0]] = {c: float(v) for c, v in zip(BENCH_COLUMNS[1:], parts[1:])}
    return rows


# ---------------------------------------------------------------------------
# entry
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nnfabric", description="Deferred interventions on a toy language model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", help="run the fabric server")
    s.add_argument("--config", required=True, help="server config JSON")
    s.add_argument("--port", type=int, default=None, help="override the configured port")
    s.set_defaults(func=cmd_serve)

    r = sub.add_parser("run", help="execute a saved intervention graph")
    r.add_argument("--model", required=True)
    r.add_argument("--graph", required=True, help="graph JSON file")
    r.add_argument("--input", required=True, help='token ids, e.g. "1,2,3;4,5" for two invokes')
    r.add_argument("--remote", default=None, metavar="HOST:PORT")
    r.add_argument("--session", default=None, help="remote session id")
    r.add_argument("--registry", default="models.json", help="registry used for local runs")
    r.add_argument("--timeout", type=float, default=30.0)
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("graph", help="inspect a graph file")
    g.add_argument("--graph", required=True)
    g.add_argument("--format", choices=("summary", "dot"), default="summary")
    g.set_defaults(func=cmd_graph)

    b = sub.add_parser("bench", help="time interventions (TSV output)")
    b.add_argument("--model", default="toy")
    b.add_argument("--registry", default="models.json")
    b.add_argument("--mode", action="append", choices=BENCH_MODES + ("all",), default=None,
                   help="repeatable; default runs all modes")
    b.add_argument("--batch", type=int, default=32)
    b.add_argument("--seq", type=int, default=None, help="prompt length (default: model max_seq_len)")
    b.add_argument("--iters", type=int, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--rounds", type=int, default=3, help="interleaved measurement rounds")
    b.add_argument("--layer", type=int, default=0, help="layer patched in act-patch")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as e:
        print(f"validation failed with {len(e.issues)} issue(s):", file=sys.stderr)
        _print_issues(e.issues)
        return EXIT_VALIDATION
    except DecodeError as e:
        print("validation failed with 1 issue(s):", file=sys.stderr)
        _print_issues([ValidationIssue("decode", e.node, None, e.message)])
        return EXIT_VALIDATION
    except TransportError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NNFabricError as e:
        print(f"error ({e.kind}): {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
