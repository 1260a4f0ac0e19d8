"""Offline calibration: entropy profiles, layer/head grouping and plan files."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import entropy as E
from .errors import (
    BadM,
    BadRange,
    DegenerateInput,
    EmptyCalibration,
    FingerprintMismatch,
    SchemaError,
    WindowUnderflow,
)
from .model import Model, encode, prefill

PLAN_SCHEMA = "unccache-plan/1"
SOURCES = ("hidden_state", "query", "key", "value")


@dataclass(frozen=True)
class PlanConfig:
    """Planning hyperparameters.

    ``groups`` forces the layer group count instead of deriving it from
    ``epsilon``. ``top_k`` is ``"elbow"``, ``"all"`` or a fixed int.
    """

    epsilon: float = 1.0
    l: int = 8
    s_min: int = 1536
    s_max: int = 4096
    m: int = 2
    s_i1: int = 512
    delta_s_h: int = 256
    top_k: str | int = "elbow"
    groups: int | None = None
    source: str = "query"
    samples: int | None = None

    def __post_init__(self):
        if self.s_min > self.s_max:
            raise BadRange(f"s_min={self.s_min} exceeds s_max={self.s_max}")
        if self.m < 1:
            raise BadM("m must be >= 1")
        if self.l < 1:
            raise ValueError("l must be >= 1")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if self.groups is not None and self.groups < 1:
            raise ValueError("groups must be >= 1")


@dataclass
class EntropyProfile:
    per_layer: list[float]
    source: str
    per_head: list[list[float]] | None = None


@dataclass
class LayerPlan:
    boundaries: list[int]
    group_sizes: list[int]
    s_max: int
    s_min: int
    delta_s: float
    n_layers: int

    def group_of_layer(self, layer: int) -> int:
        return sum(1 for b in self.boundaries if b <= layer)

    def size_for_layer(self, layer: int) -> int:
        return self.group_sizes[self.group_of_layer(layer)]


@dataclass
class HeadPlan:
    per_layer_order: list[list[int]]
    group_of_head: list[list[int]]
    group_windows: list[list[int]]
    votes: list[list[int]]
    mean_erank: list[list[float]] = field(default_factory=list)


@dataclass
class CompressionPlan:
    layer_plan: LayerPlan
    head_plan: HeadPlan
    config: PlanConfig
    model_fingerprint: str
    profile: EntropyProfile | None = None

    def head_windows(self) -> np.ndarray:
        hp = self.head_plan
        return np.array(
            [[hp.group_windows[i][g] for g in groups] for i, groups in enumerate(hp.group_of_head)],
            dtype=np.float64,
        )

    def mean_window(self) -> float:
        return float(self.head_windows().mean())

    def to_json(self) -> dict:
        return {
            "schema": PLAN_SCHEMA,
            "model_fingerprint": self.model_fingerprint,
            "config": asdict(self.config),
            "profile": asdict(self.profile) if self.profile else None,
            "layer_plan": asdict(self.layer_plan),
            "head_plan": asdict(self.head_plan),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CompressionPlan":
        if obj.get("schema") != PLAN_SCHEMA:
            raise SchemaError(f"unsupported plan schema {obj.get('schema')!r}")
        prof = obj.get("profile")
        return cls(
            layer_plan=LayerPlan(**obj["layer_plan"]),
            head_plan=HeadPlan(**obj["head_plan"]),
            config=PlanConfig(**obj["config"]),
            model_fingerprint=obj["model_fingerprint"],
            profile=EntropyProfile(**prof) if prof else None,
        )


# ---------------------------------------------------------------------------
# calibration


def load_corpus(path, max_len: int) -> list[list[int]]:
    """One document per non-empty line, byte-tokenised with BOS and truncated."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [encode(line)[:max_len] for line in lines if line.strip()]


def _check_calibration(calibration) -> list[list[int]]:
    seqs = [list(s) for s in calibration]
    if not seqs:
        raise EmptyCalibration("no calibration sequences")
    short = [i for i, s in enumerate(seqs) if len(s) < 2]
    if short:
        raise EmptyCalibration(f"calibration sequences {short} have fewer than 2 tokens")
    return seqs


def _matrices(cap, source: str) -> list[np.ndarray]:
    if source == "hidden_state":
        return [cap.hidden]
    return list({"query": cap.q, "key": cap.k, "value": cap.v}[source])


def head_eranks(model: Model, tokens, source: str = "query", k_mode="elbow") -> np.ndarray:
    """Truncated erank of every (layer, head) matrix for one sequence.

    For ``hidden_state`` the second axis has length one.
    """
    caps = prefill(model, tokens, capture=True).captures
    return np.array(
        [[E.truncated_erank_of(x, k_mode) for x in _matrices(cap, source)] for cap in caps]
    )


def profile_layers(model: Model, calibration, source: str = "query", k_mode="elbow") -> EntropyProfile:
    """Per-layer truncated erank, averaged over heads and calibration sequences."""
    seqs = _check_calibration(calibration)
    try:
        per_seq = [head_eranks(model, s, source, k_mode) for s in seqs]
    except DegenerateInput as exc:
        raise EmptyCalibration(f"calibration produced a degenerate matrix: {exc}") from exc
    per_head = np.mean(per_seq, axis=0)
    return EntropyProfile(
        per_layer=[float(v) for v in per_head.mean(axis=1)],
        source=source,
        per_head=per_head.tolist(),
    )


def vote_heads(model: Model, calibration, samples: int | None = None, k_mode="elbow"):
    """Head votes from per-sample ranking of query truncated erank.

    In every sample and layer the top half of the heads (by truncated erank,
    lower index first on ties) get one vote. Returns ``(votes, mean_erank)``,
    both shaped (layers, heads).
    """
    seqs = _check_calibration(calibration)
    if samples is not None:
        if samples < 1:
            raise EmptyCalibration("samples must be >= 1")
        seqs = seqs[:samples]
    cfg = model.config
    votes = np.zeros((cfg.n_layers, cfg.n_heads), dtype=np.int64)
    total = np.zeros((cfg.n_layers, cfg.n_heads))
    top = cfg.n_heads // 2
    for s in seqs:
        er = head_eranks(model, s, "query", k_mode)
        total += er
        for layer in range(cfg.n_layers):
            order = np.lexsort((np.arange(cfg.n_heads), -er[layer]))
            votes[layer, order[:top]] += 1
    return votes, total / len(seqs)


def partition_layers(profile, epsilon: float) -> list[int]:
    """Layer indices that start a new group: a drop of more than ``epsilon``."""
    a = list(profile.per_layer if isinstance(profile, EntropyProfile) else profile)
    if len(a) < 2:
        raise ValueError("profile needs at least 2 layers")
    return [i + 1 for i in range(len(a) - 1) if a[i] > a[i + 1] and a[i] - a[i + 1] > epsilon]


def boundaries_for_groups(profile, groups: int) -> list[int]:
    """Boundaries at the ``groups - 1`` largest layer-to-layer drops."""
    a = np.asarray(profile.per_layer if isinstance(profile, EntropyProfile) else profile, float)
    if not 1 <= groups <= a.shape[0]:
        raise BadRange(f"groups={groups} outside [1, {a.shape[0]}]")
    drops = a[:-1] - a[1:]
    order = np.lexsort((np.arange(drops.shape[0]), -drops))
    return sorted(int(i) + 1 for i in order[: groups - 1])


def layer_schedule(groups: int, s_max: int, s_min: int) -> list[int]:
    """Context size per layer group, shrinking linearly from s_max to s_min.

    Groups step down by the whole-token part of (s_max - s_min) / (G - 1); the
    last group is pinned to s_min and absorbs the leftover fraction.
    """
    if s_min > s_max:
        raise BadRange(f"s_min={s_min} exceeds s_max={s_max}")
    if groups < 1:
        raise BadRange("need at least one group")
    if groups == 1:
        return [int(s_max)]
    step = (int(s_max) - int(s_min)) // (groups - 1)
    sizes = [int(s_max) - g * step for g in range(groups)]
    sizes[-1] = int(s_min)
    return sizes


def group_heads(votes, m: int, mean_erank=None) -> tuple[list[list[int]], list[list[int]]]:
    """Sort each layer's heads and cut them into ``m`` contiguous groups.

    Order: more votes first, then higher mean erank, then lower index. When
    ``m`` does not divide the head count the leading groups get one extra head.
    Returns ``(per_layer_order, group_of_head)``.
    """
    votes = np.atleast_2d(np.asarray(votes))
    n_layers, n_heads = votes.shape
    if m < 1 or m > n_heads:
        raise BadM(f"m={m} must be in [1, {n_heads}]")
    er = np.zeros(votes.shape) if mean_erank is None else np.atleast_2d(np.asarray(mean_erank, float))
    sizes = [n_heads // m + (1 if g < n_heads % m else 0) for g in range(m)]
    labels = np.repeat(np.arange(m), sizes)
    orders, groups = [], []
    for layer in range(n_layers):
        order = np.lexsort((np.arange(n_heads), -er[layer], -votes[layer]))
        g = np.empty(n_heads, dtype=np.int64)
        g[order] = labels
        orders.append([int(h) for h in order])
        groups.append([int(x) for x in g])
    return orders, groups


def head_schedule(s_i1: int, m: int, delta_s_h: int) -> list[int]:
    """Window per head group, largest first, uniform step ``delta_s_h``."""
    if m < 1:
        raise BadM("m must be >= 1")
    windows = [int(s_i1 - h * delta_s_h) for h in range(m)]
    if min(windows) < 1:
        raise WindowUnderflow(f"window {min(windows)} < 1 for s_i1={s_i1}, m={m}, step={delta_s_h}")
    return windows


CALIB_SCHEMA = "unccache-calib/1"


@dataclass
class Calibration:
    """Measured inputs to a plan: layer profile plus head votes."""

    profile: EntropyProfile
    votes: list[list[int]]
    mean_erank: list[list[float]]
    model_fingerprint: str
    top_k: str | int = "elbow"

    def to_json(self) -> dict:
        return {"schema": CALIB_SCHEMA, **asdict(self)}

    @classmethod
    def from_json(cls, obj: dict) -> "Calibration":
        if obj.get("schema") != CALIB_SCHEMA:
            raise SchemaError(f"unsupported calibration schema {obj.get('schema')!r}")
        body = {k: v for k, v in obj.items() if k != "schema"}
        body["profile"] = EntropyProfile(**body["profile"])
        return cls(**body)


def calibrate(model: Model, calibration, config: PlanConfig | None = None) -> Calibration:
    config = config or PlanConfig()
    profile = profile_layers(model, calibration, config.source, config.top_k)
    try:
        votes, mean_er = vote_heads(model, calibration, config.samples, config.top_k)
    except DegenerateInput as exc:
        raise EmptyCalibration(f"calibration produced a degenerate matrix: {exc}") from exc
    return Calibration(profile, votes.tolist(), mean_er.tolist(), model.fingerprint(), config.top_k)


def assemble_plan(calib: Calibration, config: PlanConfig | None = None) -> CompressionPlan:
    """Turn measured profile and votes into layer and head schedules."""
    config = config or PlanConfig()
    profile = calib.profile
    n_layers = len(profile.per_layer)
    if config.groups is None:
        boundaries = partition_layers(profile, config.epsilon)
    else:
        boundaries = boundaries_for_groups(profile, config.groups)
    n_groups = len(boundaries) + 1
    sizes = layer_schedule(n_groups, config.s_max, config.s_min)
    delta_s = (config.s_max - config.s_min) / (n_groups - 1) if n_groups > 1 else 0.0
    layer_plan = LayerPlan(boundaries, sizes, config.s_max, config.s_min, delta_s, n_layers)

    orders, groups = group_heads(calib.votes, config.m, calib.mean_erank)
    windows = head_schedule(config.s_i1, config.m, config.delta_s_h)
    head_plan = HeadPlan(
        per_layer_order=orders,
        group_of_head=groups,
        group_windows=[list(windows) for _ in range(n_layers)],
        votes=[list(map(int, v)) for v in calib.votes],
        mean_erank=[list(map(float, v)) for v in calib.mean_erank],
    )
    return CompressionPlan(layer_plan, head_plan, config, calib.model_fingerprint, profile)


def build_plan(model: Model, calibration, config: PlanConfig | None = None) -> CompressionPlan:
    config = config or PlanConfig()
    return assemble_plan(calibrate(model, calibration, config), config)


def plan_bytes(plan: CompressionPlan) -> bytes:
    return (json.dumps(plan.to_json(), sort_keys=True, indent=2) + "\n").encode("utf-8")


def save_plan(plan: CompressionPlan, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(plan_bytes(plan))
    tmp.replace(path)


def load_plan(path, model: Model | None = None) -> CompressionPlan:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    plan = CompressionPlan.from_json(obj)
    if model is not None and plan.model_fingerprint != model.fingerprint():
        raise FingerprintMismatch("plan was built for different weights")
    return plan
