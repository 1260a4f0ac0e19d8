"""Experiment measurements and the JSON report they feed."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import entropy as E
from . import policies as P
from .errors import BadRatio, SchemaError
from .model import BOS, Model, apply_rope, causal_attention, generate, prefill, rope_tables
from .planner import CompressionPlan
from .wired import LETTERS, MARKER

REPORT_SCHEMA = "unccache-report/1"


def round2(x: float) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def compression_rate(windows, full_context: int, removed=None) -> float:
    """Mean retained window over full context, in percent to 2 decimals.

    ``windows`` is a plan, a (layers, heads) array, or a single mean window.
    Windows are capped at ``full_context``; removed heads count as zero.
    """
    if full_context <= 0:
        raise ValueError("full_context must be positive")
    if isinstance(windows, CompressionPlan):
        w = windows.head_windows()
    else:
        w = np.asarray(windows, dtype=np.float64)
    w = np.minimum(np.atleast_2d(w), full_context).copy()
    if removed:
        for layer, heads in enumerate(removed):
            for h in heads:
                w[layer, h] = 0.0
    return round2(100.0 * w.mean() / full_context)


def policy_windows(policy: P.Policy, n_layers: int, n_heads: int, full_context: int) -> np.ndarray:
    out = np.full((n_layers, n_heads), float(full_context))
    for layer in range(n_layers):
        for h, w in enumerate(policy.head_windows(layer, n_heads)):
            if w is not None:
                out[layer, h] = w
        for h in policy.removed_heads(layer, n_heads):
            out[layer, h] = 0.0
    return out


# ---------------------------------------------------------------------------
# H/R trend analysis


@dataclass
class TrendAnalysis:
    full_trend: list[float]
    trends: dict[str, list[float]]
    pearson_by_ratio: dict[str, float]


def _select_hr(mass, n: int, hist: int, recent: int) -> np.ndarray:
    """Last ``recent`` rows plus the ``hist`` older rows with the most mass."""
    cut = n - recent
    idx = np.arange(cut)
    order = np.lexsort((-idx, -mass[:cut]))
    chosen = np.sort(idx[order[:hist]])
    return np.concatenate([chosen, np.arange(cut, n)])


def hr_trend_analysis(model: Model, tokens, ratios, k_mode="elbow") -> TrendAnalysis:
    """Compare per-layer key erank trends after H/R compression to the full trend.

    For each ratio (H, R) every head keeps its last R key rows plus the H older
    rows receiving the most attention from those R queries; the per-layer
    trend is the mean truncated erank over heads.
    """
    n = len(tokens)
    for hist, recent in ratios:
        if hist < 0 or recent < 0 or hist + recent > n or hist + recent < 2:
            raise BadRatio(f"ratio {hist}/{recent} invalid for {n} tokens")
    caps = prefill(model, tokens, capture=True).captures
    full = []
    attn = []
    for cap in caps:
        full.append(float(np.mean([E.truncated_erank_of(k, k_mode) for k in cap.k])))
        cos, sin = rope_tables(cap.positions, model.config)
        _, w = causal_attention(apply_rope(cap.q, cos, sin), apply_rope(cap.k, cos, sin), cap.v, cap.positions)
        attn.append(w.astype(np.float64))
    trends, corr = {}, {}
    for hist, recent in ratios:
        label = f"{hist}/{recent}"
        trend = []
        for cap, w in zip(caps, attn):
            rows = cap.k.shape[1]
            vals = []
            for j in range(cap.k.shape[0]):
                mass = w[j, rows - recent :, :].sum(axis=0) if recent else np.zeros(rows)
                keep = _select_hr(mass, rows, min(hist, rows - recent), recent)
                vals.append(E.truncated_erank_of(cap.k[j][keep], k_mode))
            trend.append(float(np.mean(vals)))
        trends[label] = trend
        corr[label] = E.pearson(trend, full)
    return TrendAnalysis(full, trends, corr)


def write_trend_csv(path, trend) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "erank"])
        for i, v in enumerate(trend):
            w.writerow([i, repr(float(v))])
    tmp.replace(path)


def read_trend_csv(path) -> list[float]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["erank"]) for r in rows]


# ---------------------------------------------------------------------------
# needle retrieval


@dataclass
class NeedleReport:
    hit_rate: float
    hits: list[bool]
    depths: list[float]
    seed: int
    haystack_len: int


FILLER = b"abcdefghijklmnopqrstuvwxyz     .,"


def needle_prompts(haystack_len: int, seed: int, placements: int = 20, needle_len: int = 4, max_depth: float = 1.0):
    """Yield ``(depth, tokens, expected)`` for evenly spaced needle depths.

    ``haystack_len`` is the full prompt length: BOS, filler, the needle
    (marker + letters) and the trailing marker that cues the copy.
    """
    filler_len = haystack_len - needle_len - 3
    if filler_len < 1:
        raise ValueError("haystack too short for the needle")
    rng = np.random.default_rng(seed)
    for i in range(placements):
        depth = max_depth * i / max(placements - 1, 1)
        hay = bytes(rng.choice(list(FILLER), filler_len).tolist())
        letters = "".join(rng.choice(list(LETTERS), needle_len, replace=False))
        at = int(round(depth * filler_len))
        body = hay[:at] + (MARKER + letters).encode() + hay[at:] + MARKER.encode()
        yield depth, [BOS] + list(body), list(letters.encode())


def needle_task(model: Model, policy: P.Policy | None, haystack_len: int, seed: int, placements: int = 20,
                needle_len: int = 4, max_depth: float = 1.0) -> NeedleReport:
    if haystack_len > model.config.max_context:
        raise ValueError("haystack_len exceeds the model context")
    hits, depths = [], []
    for depth, tokens, expected in needle_prompts(haystack_len, seed, placements, needle_len, max_depth):
        out = generate(model, tokens, policy, steps=needle_len)
        hits.append(out == expected)
        depths.append(depth)
    return NeedleReport(sum(hits) / len(hits), hits, depths, seed, haystack_len)


# ---------------------------------------------------------------------------
# agreement with FullKV


@dataclass
class AgreementResult:
    agreement: float
    per_text: list[float]
    per_layer_retention: list[float]
    peak_rows: int


def agreement_probe(model: Model, policy: P.Policy, texts, steps: int = 16, threads: int = 1) -> AgreementResult:
    """Position-wise match rate of greedy continuations against FullKV."""
    texts = [list(t) for t in texts]
    if not texts:
        raise ValueError("probe set is empty")

    def one(tokens):
        ref = generate(model, tokens, P.FullKV(policy.l), steps)
        stats = {}
        out = generate(model, tokens, policy, steps, stats)
        match = sum(a == b for a, b in zip(ref, out)) / steps
        return match, stats

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, texts))
    else:
        results = [one(t) for t in texts]
    per_text = [r[0] for r in results]
    lengths = np.array([r[1]["final_lengths"] for r in results], dtype=np.float64)
    retention = lengths.sum(axis=2).mean(axis=0)
    return AgreementResult(
        agreement=float(np.mean(per_text)),
        per_text=per_text,
        per_layer_retention=[float(v) for v in retention],
        peak_rows=int(max(r[1]["peak_rows"] for r in results)),
    )


def time_inference(model: Model, policy: P.Policy, tokens, steps: int = 16, warmup: int = 1, repeats: int = 3) -> dict:
    """Median prefill and per-token decode time in milliseconds."""
    from .model import decode_step

    pre, dec = [], []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        res = prefill(model, tokens, policy)
        t1 = time.perf_counter()
        tok = int(np.argmax(res.logits))
        for _ in range(steps):
            tok = int(np.argmax(decode_step(model, res.cache, tok).logits))
        t2 = time.perf_counter()
        if i >= warmup:
            pre.append((t1 - t0) * 1e3)
            dec.append((t2 - t1) * 1e3 / steps)
    return {"prefill_ms": float(np.median(pre)), "decode_ms_per_token": float(np.median(dec))}


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    policy: dict
    compression_rate: float
    per_layer_retention: list[float]
    agreement: float
    peak_rows: int
    memory_bytes: int
    pearson_by_ratio: dict[str, float] = field(default_factory=dict)
    needle_hit_rate: float | None = None
    timing: dict | None = None

    def __post_init__(self):
        if not 0 < self.compression_rate <= 100:
            raise ValueError("compression_rate must be in (0, 100]")
        if not 0 <= self.agreement <= 1:
            raise ValueError("agreement must be in [0, 1]")

    def to_json(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        if obj.get("schema") != REPORT_SCHEMA:
            raise SchemaError(f"unsupported report schema {obj.get('schema')!r}")
        body = {k: v for k, v in obj.items() if k != "schema"}
        return cls(**body)


def report_bytes(report: MetricsReport) -> bytes:
    return (json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n").encode("utf-8")


def save_report(report: MetricsReport, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(report_bytes(report))
    tmp.replace(path)


def load_report(path) -> MetricsReport:
    return MetricsReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def run_report(model: Model, policy: P.Policy, probes, steps: int = 16, hr_tokens=None, ratios=(),
               needle: dict | None = None, timing: bool = False, threads: int = 1,
               k_mode="elbow") -> MetricsReport:
    """Everything a run measures, bundled into one report.

    ``timing`` is off by default so that reports stay byte-reproducible.
    """
    cfg = model.config
    probe = agreement_probe(model, policy, probes, steps, threads)
    windows = policy_windows(policy, cfg.n_layers, cfg.n_heads, cfg.max_context)
    corr = {}
    if hr_tokens is not None and ratios:
        corr = hr_trend_analysis(model, hr_tokens, ratios, k_mode).pearson_by_ratio
    hit = None
    if needle:
        hit = needle_task(model, policy, **needle).hit_rate
    times = time_inference(model, policy, list(probes)[0], steps) if timing else None
    return MetricsReport(
        policy=policy.describe(),
        compression_rate=compression_rate(windows, cfg.max_context),
        per_layer_retention=probe.per_layer_retention,
        agreement=probe.agreement,
        peak_rows=probe.peak_rows,
        memory_bytes=probe.peak_rows * 2 * cfg.d_head * 4,
        pearson_by_ratio=corr,
        needle_hit_rate=hit,
        timing=times,
    )


def compare_reports(reports: dict[str, MetricsReport]) -> list[tuple[str, list]]:
    """Rows of (metric, values per report) for the scalar fields shared by all."""
    names = list(reports)
    rows = []
    for key in ("compression_rate", "agreement", "peak_rows", "memory_bytes", "needle_hit_rate"):
        rows.append((key, [getattr(reports[n], key) for n in names]))
    labels = sorted(set().union(*(r.pearson_by_ratio for r in reports.values())))
    for label in labels:
        rows.append((f"pearson[{label}]", [reports[n].pearson_by_ratio.get(label) for n in names]))
    return rows
