"""Hand-built two-layer copy model used by the needle task.

Residual stream layout (d_model = 64):

====  =====================================================
0     constant 1
1-16  identity of the current token (16 marker symbols)
17    identity slot shared by every other byte ("filler")
18-33 identity of the previous token (written by layer 0)
34-49 identity of the copied token (written by layer 1)
====  =====================================================

Layer 0, head 0 attends from position p to p-1 through the rotary dims alone:
the query is the constant key rotated back by one step, so the score is
``sum_i cos(theta_i * (p - j - 1))``, peaked at j = p - 1. Layer 1, head 0 is
an induction head on the non-rotary dims: the current token's identity is
matched against each key's previous-token identity and the matched row's
identity is copied into the output slot. Every other weight is zero.
"""
import numpy as np

from .model import Model, ModelConfig, rope_tables

SYMBOLS = "#ABCDEFGHIJKLMNO"
MARKER = "#"
LETTERS = SYMBOLS[1:]

WIRED_CONFIG = ModelConfig(
    n_layers=2,
    n_heads=2,
    d_head=32,
    d_ff=4,
    vocab_size=258,
    max_context=512,
    seed=0,
    rotary_dims=16,
    rope_base=10000.0,
)

BIAS = 0
CUR = 1
FILLER = 17
PREV = 18
OUT = 34

# effective pre-softmax peak margins (see module docstring)
PREV_SHARPNESS = 40.0
MATCH_GAIN = 4.0
UNEMBED_GAIN = 10.0


def symbol_of(byte: int) -> int | None:
    ch = chr(byte) if byte < 128 else ""
    idx = SYMBOLS.find(ch) if ch else -1
    return idx if idx >= 0 else None


def wired_copy_model() -> Model:
    cfg = WIRED_CONFIG
    d, dh = cfg.d_model, cfg.d_head
    t = {}
    embed = np.zeros((cfg.vocab_size, d), np.float32)
    embed[:, BIAS] = 1.0
    for b in range(cfg.vocab_size):
        s = symbol_of(b) if b < 256 else None
        embed[b, CUR + s if s is not None else FILLER] = 1.0
    t["embed"] = embed

    # every embedding row has two unit entries, so the layer-0 norm scale is fixed
    s0 = np.sqrt(d / 2.0)
    half = cfg.rotary // 2
    inv = cfg.rope_base ** (-np.arange(half) * 2.0 / cfg.rotary)
    c = PREV_SHARPNESS * np.sqrt(dh)
    wq0 = np.zeros((d, d), np.float32)
    wk0 = np.zeros((d, d), np.float32)
    wv0 = np.zeros((d, d), np.float32)
    wo0 = np.zeros((d, d), np.float32)
    for i in range(half):
        # query = key rotated by -1 step: scores peak one position back
        wk0[BIAS, i] = 1.0 / s0
        wq0[BIAS, i] = c * np.cos(inv[i]) / s0
        wq0[BIAS, i + half] = -c * np.sin(inv[i]) / s0
    for s in range(len(SYMBOLS)):
        wv0[CUR + s, s] = 1.0 / s0
        wo0[s, PREV + s] = 1.0

    wq1 = np.zeros((d, d), np.float32)
    wk1 = np.zeros((d, d), np.float32)
    wv1 = np.zeros((d, d), np.float32)
    wo1 = np.zeros((d, d), np.float32)
    nonrot = cfg.rotary
    for s in range(len(SYMBOLS)):
        wq1[CUR + s, nonrot + s] = MATCH_GAIN
        wk1[PREV + s, nonrot + s] = MATCH_GAIN
        wv1[CUR + s, s] = 1.0
        wo1[s, OUT + s] = 1.0 / s0

    unembed = np.zeros((d, cfg.vocab_size), np.float32)
    for s, ch in enumerate(SYMBOLS):
        unembed[OUT + s, ord(ch)] = UNEMBED_GAIN

    for i, (wq, wk, wv, wo) in enumerate([(wq0, wk0, wv0, wo0), (wq1, wk1, wv1, wo1)]):
        t[f"layers.{i}.attn_norm"] = np.ones(d, np.float32)
        t[f"layers.{i}.wq"] = wq
        t[f"layers.{i}.wk"] = wk
        t[f"layers.{i}.wv"] = wv
        t[f"layers.{i}.wo"] = wo
        t[f"layers.{i}.mlp_norm"] = np.ones(d, np.float32)
        t[f"layers.{i}.w1"] = np.zeros((d, cfg.d_ff), np.float32)
        t[f"layers.{i}.w2"] = np.zeros((cfg.d_ff, d), np.float32)
    t["final_norm"] = np.ones(d, np.float32)
    t["unembed"] = unembed
    return Model(cfg, t, name="wired-copy")


def previous_token_margin(n_positions: int) -> float:
    """Smallest gap between the offset-1 score and any other offset's score.

    Analytic check on the layer-0 head: in units of the query sharpness,
    the score at offset ``delta`` is ``sum_i cos(theta_i (delta - 1))``.
    """
    cos, _ = rope_tables(np.arange(n_positions), WIRED_CONFIG)
    inv_cos = cos.astype(np.float64)
    # cos(theta_i * k) for k = 0..n-1, summed over frequencies
    f = inv_cos.sum(axis=1)
    return float(PREV_SHARPNESS * (f[0] - f[1:].max()))
