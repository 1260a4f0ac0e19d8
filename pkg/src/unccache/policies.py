"""KV-cache state and the eviction policies that act on it.

A policy only answers sizing questions (how many hidden rows survive into a
layer, how large each head's window is, which heads are dropped). The model
drives prefill/decode and calls the selection helpers in this module, so every
mutation of a cache goes through the same few functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadK, PlanMismatch


@dataclass
class HeadCache:
    """Cached rows for one attention head.

    ``history`` holds the attention rows of the last ``l`` query steps, aligned
    to the current cached rows; its column sum is the eviction score.
    """

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    history: np.ndarray

    @classmethod
    def empty(cls, d_head: int) -> "HeadCache":
        return cls(
            keys=np.zeros((0, d_head), np.float32),
            values=np.zeros((0, d_head), np.float32),
            positions=np.zeros(0, np.int64),
            history=np.zeros((0, 0)),
        )

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def accumulator(self) -> np.ndarray:
        if self.history.shape[0] == 0:
            return np.zeros(len(self))
        return self.history.sum(axis=0)

    def append(self, key, value, position: int) -> None:
        self.keys = np.vstack([self.keys, key[None, :]])
        self.values = np.vstack([self.values, value[None, :]])
        self.positions = np.append(self.positions, np.int64(position))
        self.history = np.hstack([self.history, np.zeros((self.history.shape[0], 1))])

    def record(self, weights, l: int) -> None:
        """Push one query step's attention row, keeping only the last ``l``."""
        self.history = np.vstack([self.history, np.asarray(weights, np.float64)[None, :]])[-l:]

    def keep(self, idx) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        self.keys = self.keys[idx]
        self.values = self.values[idx]
        self.positions = self.positions[idx]
        self.history = self.history[:, idx]

    def drop(self, index: int) -> None:
        self.keep(np.delete(np.arange(len(self)), index))


@dataclass
class HeadRemovalMap:
    """Per layer: removed heads and the retained head standing in for each."""

    removed: list[list[int]] = field(default_factory=list)
    substitute: list[dict[int, int]] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not any(self.removed)

    def to_json(self) -> dict:
        return {
            "removed": [list(map(int, r)) for r in self.removed],
            "substitute": [{str(k): int(v) for k, v in s.items()} for s in self.substitute],
        }


@dataclass
class KVCacheState:
    layers: list[list[HeadCache]]
    windows: list[list[int | None]]
    l: int
    next_position: int
    removal: HeadRemovalMap = field(default_factory=HeadRemovalMap)

    def head_lengths(self) -> list[list[int]]:
        return [[len(h) for h in layer] for layer in self.layers]

    def total_rows(self) -> int:
        return sum(len(h) for layer in self.layers for h in layer)

    def is_removed(self, layer: int, head: int) -> bool:
        return bool(self.removal.removed) and head in self.removal.removed[layer]


# ---------------------------------------------------------------------------
# selection rules


def select_keep(scores, budget: int, l: int) -> np.ndarray:
    """Indices (ascending) of the rows kept under a row budget.

    The last ``min(l, budget)`` rows are always kept. The rest of the budget
    goes to the highest-scoring older rows; on equal scores the newer row wins,
    so the oldest rows are evicted first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if budget >= n:
        return np.arange(n)
    budget = max(int(budget), 0)
    protected = min(l, budget)
    cut = n - protected
    idx = np.arange(cut)
    order = np.lexsort((-idx, -scores[:cut]))
    chosen = order[: budget - protected]
    return np.sort(np.concatenate([idx[chosen], np.arange(cut, n)])).astype(np.int64)


def evict_prefill_hidden(n_rows: int, next_group_size: int, trace, l: int) -> np.ndarray:
    """Surviving hidden-row indices before a layer whose budget is ``next_group_size``.

    ``trace`` holds the previous layer's attention rows for its last queries,
    shape ``(..., n_rows)``; rows are scored by their total received mass.
    """
    if next_group_size >= n_rows:
        return np.arange(n_rows)
    trace = np.asarray(trace, dtype=np.float64)
    mass = trace.reshape(-1, n_rows).sum(axis=0)
    return select_keep(mass, next_group_size, l)


def evict_decode(head: HeadCache, window: int | None, l: int) -> int | None:
    """Row index to evict from an over-full head, or None if it fits.

    Candidates exclude the most recent ``min(l, window)`` rows; the lowest
    accumulated score goes, oldest first on ties.
    """
    n = len(head)
    if window is None or n <= window:
        return None
    protected = min(l, window)
    acc = head.accumulator()[: n - protected]
    return int(np.argmin(acc))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def match_substitutes(distributions, removed) -> dict[int, int]:
    """Map each removed head to the retained head whose distribution is closest.

    ``distributions`` has one row per head (cumulative attention over the same
    keys). Closest means smallest cosine distance; ties go to the lower index.
    """
    dists = np.asarray(distributions, dtype=np.float64)
    removed = set(int(h) for h in removed)
    retained = [h for h in range(dists.shape[0]) if h not in removed]
    if not retained:
        raise BadK("cannot remove every head")
    out = {}
    for h in sorted(removed):
        sims = [cosine_similarity(dists[h], dists[r]) for r in retained]
        out[h] = retained[int(np.argmax(sims))]
    return out


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Base policy: keep everything."""

    name = "full"

    def __init__(self, l: int = 8):
        self.l = int(l)

    def layer_budget(self, layer: int) -> int | None:
        return None

    def head_windows(self, layer: int, n_heads: int) -> list[int | None]:
        return [None] * n_heads

    def removed_heads(self, layer: int, n_heads: int) -> list[int]:
        return []

    def describe(self) -> dict:
        return {"name": self.name, "l": self.l}


class FullKV(Policy):
    name = "full"


class CumulativeAttention(Policy):
    """Baseline: one shared window for every head, cumulative-attention eviction."""

    name = "cumulative"

    def __init__(self, window: int, l: int = 8):
        super().__init__(l)
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = int(window)

    def head_windows(self, layer, n_heads):
        return [self.window] * n_heads

    def describe(self):
        return {**super().describe(), "window": self.window}


def plan_windows(plan, layer: int, n_heads: int) -> list[int]:
    """Window of every head in ``layer`` as assigned by its plan group."""
    hp = plan.head_plan
    if layer >= len(hp.group_of_head):
        raise PlanMismatch(f"plan has no entry for layer {layer}")
    groups = hp.group_of_head[layer]
    if len(groups) != n_heads:
        raise PlanMismatch(f"plan has {len(groups)} heads for layer {layer}, model has {n_heads}")
    windows = hp.group_windows[layer]
    return [int(windows[g]) for g in groups]


class UncompGroup(Policy):
    """Per-head windows from the plan's head groups."""

    name = "uncomp-group"

    def __init__(self, plan, l: int | None = None):
        super().__init__(plan.config.l if l is None else l)
        self.plan = plan

    def head_windows(self, layer, n_heads):
        return plan_windows(self.plan, layer, n_heads)


class UncompGroupStage(UncompGroup):
    """Head groups plus layer-group hidden-state eviction during prefill."""

    name = "uncomp-group-stage"

    def layer_budget(self, layer):
        return int(self.plan.layer_plan.size_for_layer(layer))


class UncompExtreme(UncompGroup):
    """Head groups with the ``k`` lowest-ranked heads of each layer removed."""

    name = "uncomp-extreme"

    def __init__(self, plan, k: int, l: int | None = None):
        super().__init__(plan, l)
        n_heads = len(plan.head_plan.group_of_head[0]) if plan.head_plan.group_of_head else 0
        if not 0 <= k < max(n_heads, 1):
            raise BadK(f"k={k} must be in [0, {n_heads})")
        self.k = int(k)

    def removed_heads(self, layer, n_heads):
        return remove_heads(self.plan, self.k)[layer]

    def describe(self):
        return {**super().describe(), "k": self.k}


def remove_heads(plan, k_per_layer: int) -> list[list[int]]:
    """The ``k`` lowest-ranked heads of each layer, by the plan's head order."""
    out = []
    for order in plan.head_plan.per_layer_order:
        if not 0 <= k_per_layer < len(order):
            raise BadK(f"k={k_per_layer} must be in [0, {len(order)})")
        out.append(sorted(order[len(order) - k_per_layer :]) if k_per_layer else [])
    return out


POLICY_NAMES = ("full", "cumulative", "uncomp-group", "uncomp-group-stage", "uncomp-extreme")


def make_policy(name: str, plan=None, window: int | None = None, k: int = 0, l: int | None = None) -> Policy:
    if name == "full":
        return FullKV(l or 8)
    if name == "cumulative":
        if window is None:
            if plan is None:
                raise ValueError("cumulative policy needs a window or a plan")
            window = round(plan.mean_window())
        return CumulativeAttention(window, l or (plan.config.l if plan else 8))
    if plan is None:
        raise ValueError(f"policy {name!r} needs a plan")
    if name == "uncomp-group":
        return UncompGroup(plan, l)
    if name == "uncomp-group-stage":
        return UncompGroupStage(plan, l)
    if name == "uncomp-extreme":
        return UncompExtreme(plan, k, l)
    raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")
