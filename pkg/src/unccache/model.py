"""A small pre-norm decoder-only transformer in float32 numpy.

Layout conventions: activations are row vectors, projections are ``x @ W``
with ``W`` of shape ``(in, out)``. Keys are cached after the rotary rotation,
so evicting rows never changes the phase of the survivors.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import policies as P
from .errors import ContextOverflow, SchemaError
from .rng import SplitMix64

BOS = 256
EOS = 257
BUNDLE_MAGIC = b"UNCT"
BUNDLE_VERSION = 1
ALIGN = 64
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 4
    d_head: int = 16
    d_ff: int = 128
    vocab_size: int = 258
    max_context: int = 256
    seed: int = 0
    rotary_dims: int | None = None
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_head", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_context < 8:
            raise ValueError("max_context must be >= 8")
        r = self.rotary
        if r % 2 or not 0 <= r <= self.d_head:
            raise ValueError("rotary_dims must be even and at most d_head")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    @property
    def rotary(self) -> int:
        return self.d_head - self.d_head % 2 if self.rotary_dims is None else self.rotary_dims

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def tensor_names(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Tensors in initialisation order, with shapes."""
    d, f = cfg.d_model, cfg.d_ff
    out = [("embed", (cfg.vocab_size, d))]
    for i in range(cfg.n_layers):
        out += [
            (f"layers.{i}.attn_norm", (d,)),
            (f"layers.{i}.wq", (d, d)),
            (f"layers.{i}.wk", (d, d)),
            (f"layers.{i}.wv", (d, d)),
            (f"layers.{i}.wo", (d, d)),
            (f"layers.{i}.mlp_norm", (d,)),
            (f"layers.{i}.w1", (d, f)),
            (f"layers.{i}.w2", (f, d)),
        ]
    out += [("final_norm", (d,)), ("unembed", (d, cfg.vocab_size))]
    return out


@dataclass
class Model:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    name: str = "toy"

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for key in sorted(self.tensors):
            t = np.ascontiguousarray(self.tensors[key], dtype="<f4")
            h.update(key.encode())
            h.update(repr(t.shape).encode())
            h.update(t.tobytes())
        return h.hexdigest()


def init_weights(cfg: ModelConfig) -> Model:
    """Deterministic weights drawn from one SplitMix64 stream seeded by ``cfg.seed``.

    Tensors are filled in :func:`tensor_names` order, row-major. Matrices get
    standard normals scaled by ``1/sqrt(d_model)``; norm gains are ones and
    consume no random numbers.
    """
    rng = SplitMix64(cfg.seed)
    scale = 1.0 / np.sqrt(cfg.d_model)
    tensors = {}
    for name, shape in tensor_names(cfg):
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, np.float32)
        else:
            n = int(np.prod(shape))
            tensors[name] = (rng.normal(n) * scale).astype(np.float32).reshape(shape)
    return Model(cfg, tensors)


# ---------------------------------------------------------------------------
# tensor bundle


def save_bundle(model: Model, path) -> None:
    """Write ``UNCT`` | u32 version | u32 header length | JSON header | blobs.

    Blob offsets in the header are absolute file offsets, each 64-byte aligned.
    """
    cfg = asdict(model.config)
    names = [n for n, _ in tensor_names(model.config) if n in model.tensors]
    names += sorted(set(model.tensors) - set(names))

    def header_bytes(offsets):
        entries = {
            n: {"shape": list(model.tensors[n].shape), "dtype": "f32", "offset": offsets[n]}
            for n in names
        }
        meta = {"config": cfg, "name": model.name}
        return json.dumps({"__metadata__": meta, "tensors": entries}, sort_keys=True).encode()

    # offsets depend on header length; two passes settle it
    offsets = {n: 0 for n in names}
    for _ in range(3):
        head = header_bytes(offsets)
        pos = _align(12 + len(head))
        new = {}
        for n in names:
            new[n] = pos
            pos = _align(pos + model.tensors[n].size * 4)
        if new == offsets:
            break
        offsets = new
    head = header_bytes(offsets)
    buf = bytearray(BUNDLE_MAGIC + struct.pack("<II", BUNDLE_VERSION, len(head)) + head)
    for n in names:
        buf.extend(b"\0" * (offsets[n] - len(buf)))
        buf.extend(np.ascontiguousarray(model.tensors[n], dtype="<f4").tobytes())
    buf.extend(b"\0" * (_align(len(buf)) - len(buf)))
    _atomic_write(Path(path), bytes(buf))


def load_bundle(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != BUNDLE_MAGIC:
        raise SchemaError(f"{path}: not a UNCT bundle")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != BUNDLE_VERSION:
        raise SchemaError(f"{path}: unsupported bundle version {version}")
    header = json.loads(data[12 : 12 + hlen])
    meta = header.get("__metadata__", {})
    cfg = ModelConfig.from_dict(meta["config"])
    tensors = {}
    for name, entry in header["tensors"].items():
        if entry["dtype"] != "f32":
            raise SchemaError(f"{name}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        tensors[name] = arr.astype(np.float32).reshape(shape)
    return Model(cfg, tensors, name=meta.get("name", "toy"))


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# tokenizer


def encode(text: str, bos: bool = True) -> list[int]:
    ids = list(text.encode("utf-8"))
    return [BOS] + ids if bos else ids


def decode_bytes(ids) -> bytes:
    return bytes(i for i in ids if i < 256)


# ---------------------------------------------------------------------------
# primitives


def rmsnorm(x, gain):
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(NORM_EPS))) * gain


def rope_tables(positions, cfg: ModelConfig):
    half = cfg.rotary // 2
    inv = cfg.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / max(cfg.rotary, 1))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def apply_rope(x, cos, sin):
    """Rotate the leading rotary dims of ``x[..., n, d_head]`` (split halves)."""
    half = cos.shape[-1]
    if half == 0:
        return x
    a = x[..., :half]
    b = x[..., half : 2 * half]
    out = x.copy()
    out[..., :half] = a * cos - b * sin
    out[..., half : 2 * half] = b * cos + a * sin
    return out


def softmax(s):
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def gelu(x):
    c = np.float32(np.sqrt(2.0 / np.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def split_heads(x, cfg: ModelConfig):
    """(n, d_model) -> (n_heads, n, d_head)."""
    return x.reshape(x.shape[0], cfg.n_heads, cfg.d_head).transpose(1, 0, 2)


def merge_heads(x):
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def causal_attention(q, k, v, positions):
    """Full attention over rows with the given absolute positions.

    Returns ``(output, weights)`` with weights of shape (heads, n, n).
    """
    scale = np.float32(1.0 / np.sqrt(q.shape[-1]))
    scores = (q @ k.transpose(0, 2, 1)) * scale
    future = positions[None, :] > positions[:, None]
    scores = np.where(future[None], np.float32(-np.inf), scores)
    w = softmax(scores)
    return w @ v, w


def qkv(model: Model, layer: int, x, positions):
    """Pre- and post-rotary projections for a block of rows."""
    cfg = model.config
    pre = f"layers.{layer}."
    xn = rmsnorm(x, model[pre + "attn_norm"])
    q = split_heads(xn @ model[pre + "wq"], cfg)
    k = split_heads(xn @ model[pre + "wk"], cfg)
    v = split_heads(xn @ model[pre + "wv"], cfg)
    cos, sin = rope_tables(positions, cfg)
    return q, k, v, apply_rope(q, cos, sin), apply_rope(k, cos, sin)


def mlp_block(model: Model, layer: int, h):
    pre = f"layers.{layer}."
    xn = rmsnorm(h, model[pre + "mlp_norm"])
    return gelu(xn @ model[pre + "w1"]) @ model[pre + "w2"]


def final_logits(model: Model, h):
    return rmsnorm(h, model["final_norm"]) @ model["unembed"]


def reference_forward(model: Model, tokens) -> np.ndarray:
    """Plain causal forward over the whole sequence; logits for every position."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.arange(tokens.shape[0])
    h = model["embed"][tokens]
    for i in range(cfg.n_layers):
        _, _, v, qr, kr = qkv(model, i, h, positions)
        out, _ = causal_attention(qr, kr, v, positions)
        h = h + merge_heads(out) @ model[f"layers.{i}.wo"]
        h = h + mlp_block(model, i, h)
    return final_logits(model, h)


# ---------------------------------------------------------------------------
# cached inference


@dataclass
class LayerCapture:
    """Per-layer matrices seen during prefill (pre-rotary Q/K/V)."""

    positions: np.ndarray
    hidden: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


@dataclass
class PrefillResult:
    cache: P.KVCacheState
    logits: np.ndarray
    traces: list[np.ndarray]
    layer_positions: list[np.ndarray]
    captures: list[LayerCapture] = field(default_factory=list)


@dataclass
class DecodeResult:
    logits: np.ndarray
    cache: P.KVCacheState
    trace: list[list[np.ndarray | None]]
    evicted: list[list[int | None]]


def prefill(model: Model, tokens, policy: P.Policy | None = None, capture: bool = False) -> PrefillResult:
    """Run the prompt, evicting hidden rows between layers as the policy asks.

    ``traces[i]`` is layer ``i``'s attention for its last ``l`` query rows,
    shape (heads, <=l, rows_i). Layer ``i+1`` scores its incoming rows by the
    column sums of ``traces[i]``.
    """
    cfg = model.config
    policy = policy or P.FullKV()
    l = policy.l
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] < 1:
        raise ValueError("prefill needs a non-empty 1-D token list")
    if tokens.shape[0] > cfg.max_context:
        raise ContextOverflow(f"{tokens.shape[0]} tokens exceed max_context={cfg.max_context}")

    positions = np.arange(tokens.shape[0])
    h = model["embed"][tokens]
    traces, layer_pos, caps, heads = [], [], [], []
    for i in range(cfg.n_layers):
        budget = policy.layer_budget(i) if i > 0 else None
        if budget is not None and budget < h.shape[0]:
            keep = P.evict_prefill_hidden(h.shape[0], budget, traces[-1], l)
            h = h[keep]
            positions = positions[keep]
        h_in = h
        q, k, v, qr, kr = qkv(model, i, h, positions)
        out, w = causal_attention(qr, kr, v, positions)
        h = h + merge_heads(out) @ model[f"layers.{i}.wo"]
        h = h + mlp_block(model, i, h)
        trace = w[:, -l:, :].astype(np.float64)
        traces.append(trace)
        layer_pos.append(positions.copy())
        heads.append(
            [
                P.HeadCache(
                    keys=np.ascontiguousarray(kr[j]),
                    values=np.ascontiguousarray(v[j]),
                    positions=positions.copy(),
                    history=trace[j].copy(),
                )
                for j in range(cfg.n_heads)
            ]
        )
        if capture:
            caps.append(LayerCapture(positions.copy(), h_in, q, k, v))
    logits = final_logits(model, h)[-1]

    cache = P.KVCacheState(layers=heads, windows=[], l=l, next_position=int(tokens.shape[0]))
    removal = P.HeadRemovalMap()
    for i in range(cfg.n_layers):
        removed = list(policy.removed_heads(i, cfg.n_heads))
        subs = P.match_substitutes(traces[i].sum(axis=1), removed) if removed else {}
        removal.removed.append(removed)
        removal.substitute.append(subs)
        windows = list(policy.head_windows(i, cfg.n_heads))
        for j, head in enumerate(heads[i]):
            if j in removed:
                heads[i][j] = P.HeadCache.empty(cfg.d_head)
                windows[j] = 0
            elif windows[j] is not None and len(head) > windows[j]:
                head.keep(P.select_keep(head.accumulator(), windows[j], l))
        cache.windows.append(windows)
    cache.removal = removal if not removal.is_empty() else P.HeadRemovalMap()
    return PrefillResult(cache, logits, traces, layer_pos, caps)



def decode_step(model: Model, cache: P.KVCacheState, token: int) -> DecodeResult:
    """Append one token, attend over each head's cache, then evict per head.

    The new row's attention is recorded before eviction, so the window score
    of every surviving row includes this step. Removed heads take the output
    of their substitute head.
    """
    cfg = model.config
    pos = cache.next_position
    positions = np.array([pos])
    h = model["embed"][np.array([token])]
    scale = np.float32(1.0 / np.sqrt(cfg.d_head))
    trace, evicted = [], []
    for i in range(cfg.n_layers):
        _, _, v, qr, kr = qkv(model, i, h, positions)
        outs = np.zeros((cfg.n_heads, cfg.d_head), np.float32)
        layer_trace, layer_evicted = [], []
        for j, head in enumerate(cache.layers[i]):
            if cache.is_removed(i, j):
                layer_trace.append(None)
                layer_evicted.append(None)
                continue
            head.append(kr[j, 0], v[j, 0], pos)
            w = softmax((head.keys @ qr[j, 0]) * scale)
            head.record(w, cache.l)
            outs[j] = w @ head.values
            layer_trace.append(w.astype(np.float64))
            gone = P.evict_decode(head, cache.windows[i][j], cache.l)
            if gone is not None:
                head.drop(gone)
            layer_evicted.append(gone)
        if cache.removal.substitute:
            for j, src in cache.removal.substitute[i].items():
                outs[j] = outs[src]
        h = h + outs.reshape(1, -1) @ model[f"layers.{i}.wo"]
        h = h + mlp_block(model, i, h)
        trace.append(layer_trace)
        evicted.append(layer_evicted)
    cache.next_position = pos + 1
    return DecodeResult(final_logits(model, h)[0], cache, trace, evicted)


def generate(model: Model, tokens, policy: P.Policy | None = None, steps: int = 16, stats: dict | None = None) -> list[int]:
    """Greedy continuation of ``tokens`` for ``steps`` tokens.

    If ``stats`` is given it receives ``peak_rows`` and ``final_lengths``.
    """
    res = prefill(model, tokens, policy)
    cache = res.cache
    out = [int(np.argmax(res.logits))]
    peak = cache.total_rows()
    for _ in range(steps - 1):
        step = decode_step(model, cache, out[-1])
        out.append(int(np.argmax(step.logits)))
        peak = max(peak, cache.total_rows())
    if stats is not None:
        stats["peak_rows"] = peak
        stats["final_lengths"] = cache.head_lengths()
    return out
