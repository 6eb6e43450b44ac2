"""Module trees and a deterministic toy decoder-only language model.

A :class:`Module` consumes one primary tensor and produces one primary tensor.
Tensors at module boundaries are batch-first; for sequence models the second
axis is the sequence axis.  Side inputs (the attention mask) travel on the
:class:`ForwardContext`.

Each module kind has a forward function and a shape function.  The shape
function mirrors forward structurally (it calls children the same way) but only
propagates shapes, which is what scanning uses.
"""
from __future__ import annotations

import threading
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, VocabError
from .tensor import TensorValue

KINDS = ("linear", "embedding", "layer_norm", "mlp", "self_attention", "block", "lm", "custom")

INIT_SCALE = 0.08
MASK_FILL = -1e9
PAD_ID = 0


class Module:
    def __init__(
        self,
        name: str,
        kind: str,
        forward: Callable | None = None,
        infer: Callable | None = None,
        children: dict | None = None,
        params: dict | None = None,
        **attrs,
    ):
        if kind not in KINDS:
            raise ConfigError(f"unknown module kind {kind!r}")
        self.name = name
        self.kind = kind
        self.children: dict[str, Module] = {}
        for child_name, child in (children or {}).items():
            self.add_child(child_name, child)
        self.params: dict[str, TensorValue] = dict(params or {})
        self.attrs = attrs
        self._forward = forward or _FORWARD.get(kind)
        self._infer = infer or _INFER.get(kind)
        if self._forward is None:
            raise ConfigError(f"module {name!r} of kind {kind!r} needs a forward function")
        self.path = ""
        self.forward_count = 0
        self._count_lock = threading.Lock()

    def add_child(self, name: str, child: "Module") -> None:
        name = str(name)
        if not name or "." in name:
            raise ConfigError(f"invalid child name {name!r}")
        if name in self.children:
            raise ConfigError(f"duplicate child name {name!r} under {self.path or '<root>'}")
        self.children[name] = child
        child.name = name

    def assign_paths(self, prefix: str = "") -> "Module":
        self.path = prefix
        for name, child in self.children.items():
            child.assign_paths(f"{prefix}.{name}" if prefix else name)
        return self

    def __call__(self, x: TensorValue, ctx: "ForwardContext") -> TensorValue:
        hooks = ctx.hooks
        if hooks is None:
            return self._forward(self, x, ctx)
        path = self.path
        call = ctx.calls.get(path, 0)
        ctx.calls[path] = call + 1
        x = hooks.on_input(path, call, x)
        y = self._forward(self, x, ctx)
        return hooks.on_output(path, call, y)

    def infer(self, shape: tuple, rec: "ShapeRecorder") -> tuple:
        if self._infer is None:
            raise ShapeError(f"module {self.path!r} has no shape rule")
        call = rec.enter(self.path, shape)
        out = tuple(self._infer(self, tuple(shape), rec))
        rec.exit(self.path, call, out)
        return out

    def named_parameters(self) -> list:
        out = []
        for path in named_paths(self):
            m = self.get(path)
            for pname, p in m.params.items():
                out.append((f"{path}.{pname}" if path else pname, p))
        return out

    def get(self, path: str) -> "Module":
        m = self
        if path:
            for part in path.split("."):
                m = m.children[part]
        return m

    def count_forward(self) -> None:
        with self._count_lock:
            self.forward_count += 1

    def __repr__(self):
        return f"Module({self.path or '<root>'!r}, kind={self.kind}, children={list(self.children)})"


class ShapeRecorder:
    """Collects input/output shapes per (path, call) in execution order."""

    def __init__(self):
        self.calls: dict[str, int] = {}
        self.inputs: dict[tuple, tuple] = {}
        self.outputs: dict[tuple, tuple] = {}
        self.events: list[tuple] = []  # (path, port, call)

    def enter(self, path: str, shape: tuple) -> int:
        call = self.calls.get(path, 0)
        self.calls[path] = call + 1
        self.inputs[(path, call)] = tuple(shape)
        self.events.append((path, "input", call))
        return call

    def exit(self, path: str, call: int, shape: tuple) -> None:
        self.outputs[(path, call)] = tuple(shape)
        self.events.append((path, "output", call))


class ForwardContext:
    def __init__(self, mask: np.ndarray, hooks=None):
        self.mask = mask
        self.hooks = hooks
        self.calls: dict[str, int] = {}


def named_paths(m: Module) -> list:
    """Depth-first pre-order module paths; the root is ``""``."""
    out = []

    def visit(mod, prefix):
        out.append(prefix)
        for name, child in mod.children.items():
            visit(child, f"{prefix}.{name}" if prefix else name)

    visit(m, "")
    return out


def forward(m: Module, tokens, attention_mask=None, hooks=None) -> TensorValue:
    """Run ``m`` on a (batch, seq) token tensor and return its output."""
    tokens = T.as_tensor(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq), got {tokens.shape}")
    if attention_mask is None:
        mask = np.ones(tokens.shape, dtype=bool)
    else:
        raw = np.asarray(T.as_tensor(attention_mask).data)
        if raw.shape != tokens.shape:
            raise ShapeError(f"mask shape {raw.shape} does not match tokens {tokens.shape}")
        if not np.all((raw == 0) | (raw == 1)):
            raise ValueError("attention mask entries must be 0 or 1")
        mask = raw.astype(bool)
    m.count_forward()
    return m(tokens, ForwardContext(mask, hooks))


# ---------------------------------------------------------------------------
# Configuration and deterministic initialisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            v = getattr(self, field)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{field} must be a positive integer, got {v!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        known = {"vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return asdict(self)


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def uniform_init(seed: int, path: str, shape: tuple, scale: float = INIT_SCALE) -> np.ndarray:
    """SplitMix64 counter stream keyed by (seed, path), mapped to U(-scale, scale)."""
    key = int(_mix64(np.array([(seed ^ _fnv1a64(path)) & _MASK64], dtype=np.uint64))[0])
    n = int(np.prod(shape, dtype=np.int64))
    counters = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(np.uint64(key) + counters * np.uint64(_GOLDEN))
    u = (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return (-scale + 2.0 * scale * u).astype(np.float32).reshape(shape)


# ---------------------------------------------------------------------------
# Forward and shape rules per kind
# ---------------------------------------------------------------------------


def _linear_forward(m, x, ctx):
    return T.add(T.matmul(x, m.params["weight"]), m.params["bias"])


def _linear_infer(m, shape, rec):
    d_in, d_out = m.params["weight"].shape
    if len(shape) < 2 or shape[-1] != d_in:
        raise ShapeError(f"{m.path}: linear expects (..., {d_in}), got {shape}")
    return shape[:-1] + (d_out,)


def _embedding_forward(m, x, ctx):
    ids = x.data
    vocab = m.params["tok"].shape[0]
    if ids.size and (np.any(ids != np.round(ids)) or ids.min() < 0 or ids.max() >= vocab):
        raise VocabError(f"token ids must be integers in [0, {vocab})")
    seq = ids.shape[1]
    if seq > m.params["pos"].shape[0]:
        raise ShapeError(f"sequence length {seq} exceeds max_seq_len {m.params['pos'].shape[0]}")
    tok = T.embedding(m.params["tok"], ids.astype(np.intp))
    return T.add(tok, T.index_get(m.params["pos"], [slice(0, seq)]))


def _embedding_infer(m, shape, rec):
    if len(shape) != 2:
        raise ShapeError(f"{m.path}: embedding expects (batch, seq), got {shape}")
    if shape[1] > m.params["pos"].shape[0]:
        raise ShapeError(f"sequence length {shape[1]} exceeds max_seq_len {m.params['pos'].shape[0]}")
    return shape + (m.params["tok"].shape[1],)


def _layer_norm_forward(m, x, ctx):
    return T.layer_norm(x, m.params["gain"], m.params["bias"], m.attrs.get("eps", 1e-5))


def _layer_norm_infer(m, shape, rec):
    return T.layer_norm_shape(shape, m.params["gain"].shape, m.params["bias"].shape)


def _attention_forward(m, x, ctx):
    b, s, d = x.shape
    h = m.attrs["n_heads"]
    dh = d // h
    p = m.params

    def heads(t):
        return T.transpose(T.reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

    q = heads(T.add(T.matmul(x, p["w_q"]), p["b_q"]))
    k = heads(T.add(T.matmul(x, p["w_k"]), p["b_k"]))
    v = heads(T.add(T.matmul(x, p["w_v"]), p["b_v"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), T.scalar(1.0 / np.sqrt(dh)))
    # query i may attend key j iff j <= i and both positions are real tokens
    mask = ctx.mask
    allowed = np.tril(np.ones((s, s), dtype=bool))[None, None] & mask[:, None, :, None] & mask[:, None, None, :]
    probs = T.softmax(T.masked_fill(scores, ~allowed, MASK_FILL), axis=-1)
    # padded queries have no allowed key; zero them instead of a uniform row
    probs = T.masked_fill(probs, ~allowed, 0.0)
    ctx_heads = T.matmul(probs, v)
    merged = T.reshape(T.transpose(ctx_heads, (0, 2, 1, 3)), (b, s, d))
    return T.add(T.matmul(merged, p["w_o"]), p["b_o"])


def _attention_infer(m, shape, rec):
    d = m.params["w_q"].shape[0]
    if len(shape) != 3 or shape[-1] != d:
        raise ShapeError(f"{m.path}: attention expects (batch, seq, {d}), got {shape}")
    return shape


def _mlp_forward(m, x, ctx):
    c = m.children
    return c["fc_out"](T.gelu(c["fc_in"](x, ctx)), ctx)


def _mlp_infer(m, shape, rec):
    c = m.children
    return c["fc_out"].infer(c["fc_in"].infer(shape, rec), rec)


def _block_forward(m, x, ctx):
    c = m.children
    h = T.add(x, c["attn"](c["ln1"](x, ctx), ctx))
    return T.add(h, c["mlp"](c["ln2"](h, ctx), ctx))


def _block_infer(m, shape, rec):
    c = m.children
    a = c["attn"].infer(c["ln1"].infer(shape, rec), rec)
    h = T.broadcast_shape(shape, a)
    f = c["mlp"].infer(c["ln2"].infer(h, rec), rec)
    return T.broadcast_shape(h, f)


def sequential_forward(m, x, ctx):
    for child in m.children.values():
        x = child(x, ctx)
    return x


def sequential_infer(m, shape, rec):
    for child in m.children.values():
        shape = child.infer(shape, rec)
    return shape


def _lm_infer(m, shape, rec):
    if len(shape) != 2:
        raise ShapeError(f"lm expects (batch, seq), got {shape}")
    if shape[1] > m.attrs["max_seq_len"]:
        raise ShapeError(f"sequence length {shape[1]} exceeds max_seq_len {m.attrs['max_seq_len']}")
    return sequential_infer(m, shape, rec)


_FORWARD = {
    "linear": _linear_forward,
    "embedding": _embedding_forward,
    "layer_norm": _layer_norm_forward,
    "self_attention": _attention_forward,
    "mlp": _mlp_forward,
    "block": _block_forward,
    "lm": sequential_forward,
}
_INFER = {
    "linear": _linear_infer,
    "embedding": _embedding_infer,
    "layer_norm": _layer_norm_infer,
    "self_attention": _attention_infer,
    "mlp": _mlp_infer,
    "block": _block_infer,
    "lm": _lm_infer,
}


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _param(cfg, path, shape, offset=0.0):
    data = uniform_init(cfg.seed, path, shape)
    if offset:
        data = data + np.float32(offset)
    return TensorValue(data)


def _linear(cfg, path, d_in, d_out):
    return Module("", "linear", params={
        "weight": _param(cfg, f"{path}.weight", (d_in, d_out)),
        "bias": _param(cfg, f"{path}.bias", (d_out,)),
    })


def _layer_norm(cfg, path, d):
    return Module("", "layer_norm", params={
        "gain": _param(cfg, f"{path}.gain", (d,), offset=1.0),
        "bias": _param(cfg, f"{path}.bias", (d,)),
    }, eps=1e-5)


def build_toy_lm(cfg: LMConfig) -> Module:
    """Decoder-only transformer whose parameters depend only on ``cfg``.

    Layout::

        embed            token + learned position embedding
        layers.<i>       ln1 -> attn -> residual, ln2 -> mlp(fc_in, gelu, fc_out) -> residual
        ln_f
        unembed          linear to vocab logits
    """
    if not isinstance(cfg, LMConfig):
        raise ConfigError(f"expected LMConfig, got {type(cfg).__name__}")
    d, v = cfg.d_model, cfg.vocab_size
    embed = Module("", "embedding", params={
        "tok": _param(cfg, "embed.tok", (v, d)),
        "pos": _param(cfg, "embed.pos", (cfg.max_seq_len, d)),
    })
    layers = Module("", "custom", forward=sequential_forward, infer=sequential_infer)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        attn_params = {}
        for name in ("q", "k", "v", "o"):
            attn_params[f"w_{name}"] = _param(cfg, f"{pre}.attn.w_{name}", (d, d))
            attn_params[f"b_{name}"] = _param(cfg, f"{pre}.attn.b_{name}", (d,))
        block = Module("", "block", children={
            "ln1": _layer_norm(cfg, f"{pre}.ln1", d),
            "attn": Module("", "self_attention", params=attn_params, n_heads=cfg.n_heads),
            "ln2": _layer_norm(cfg, f"{pre}.ln2", d),
            "mlp": Module("", "mlp", children={
                "fc_in": _linear(cfg, f"{pre}.mlp.fc_in", d, 4 * d),
                "fc_out": _linear(cfg, f"{pre}.mlp.fc_out", 4 * d, d),
            }),
        })
        layers.add_child(str(i), block)
    root = Module("lm", "lm", children={
        "embed": embed,
        "layers": layers,
        "ln_f": _layer_norm(cfg, "ln_f", d),
        "unembed": _linear(cfg, "unembed", d, v),
    }, max_seq_len=cfg.max_seq_len, vocab_size=v)
    root.config = cfg
    return root.assign_paths()


def pad_batch(prompts: list) -> tuple:
    """Right-pad token-id rows with PAD_ID; returns (tokens, mask) tensors."""
    if not prompts:
        raise ShapeError("no prompts to batch")
    width = max(len(p) for p in prompts)
    tokens = np.full((len(prompts), width), PAD_ID, dtype=np.float32)
    mask = np.zeros((len(prompts), width), dtype=np.float32)
    for i, p in enumerate(prompts):
        tokens[i, : len(p)] = p
        mask[i, : len(p)] = 1.0
    return TensorValue(tokens), TensorValue(mask)
