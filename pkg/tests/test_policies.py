import itertools

import numpy as np
import pytest

from unccache import model as Mo
from unccache import planner as PL
from unccache import policies as P
from unccache.errors import BadK, PlanMismatch

import oracles


def head_with_scores(scores):
    n = len(scores)
    return P.HeadCache(
        keys=np.zeros((n, 2), np.float32),
        values=np.zeros((n, 2), np.float32),
        positions=np.arange(n),
        history=np.asarray(scores, float)[None, :],
    )


def make_plan(n_layers, n_heads, windows, votes=None):
    votes = votes if votes is not None else [[n_heads - h for h in range(n_heads)]] * n_layers
    profile = PL.EntropyProfile([float(n_layers - i) for i in range(n_layers)], "query")
    calib = PL.Calibration(profile, votes, [[0.0] * n_heads] * n_layers, "fp")
    s_i1 = windows[0]
    step = windows[0] - windows[1] if len(windows) > 1 else 0
    cfg = PL.PlanConfig(m=len(windows), s_i1=s_i1, delta_s_h=step, s_max=64, s_min=16, l=4)
    return PL.assemble_plan(calib, cfg)


@pytest.fixture(scope="module")
def toy():
    return Mo.init_weights(Mo.ModelConfig(n_layers=3, seed=2))


@pytest.fixture(scope="module")
def toy_plan(toy):
    cal = [Mo.encode("calibration text number %d with some words" % i) for i in range(3)]
    return PL.build_plan(toy, cal, PL.PlanConfig(s_max=48, s_min=16, s_i1=20, delta_s_h=8, m=2, l=4))


def test_evict_decode_example():
    head = head_with_scores([0.9, 0.05, 0.8, 0.7, 0.0])
    assert P.evict_decode(head, window=4, l=1) == 1


def test_evict_decode_ties_and_fit():
    assert P.evict_decode(head_with_scores([0.2] * 6), window=5, l=1) == 0
    assert P.evict_decode(head_with_scores([0.2] * 3), window=5, l=1) is None
    assert P.evict_decode(head_with_scores([0.2] * 3), window=None, l=1) is None


def test_evict_decode_never_touches_protected_suffix():
    # the lowest score sits in the protected tail
    head = head_with_scores([0.5, 0.4, 0.3, 0.0, 0.0])
    assert P.evict_decode(head, window=4, l=2) == 2


def test_select_keep_against_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 9))
        budget = int(rng.integers(0, n + 1))
        l = int(rng.integers(1, 4))
        scores = rng.integers(0, 3, n).astype(float)  # coarse values force ties
        got = P.select_keep(scores, budget, l).tolist()
        if budget >= n:
            assert got == list(range(n))
            continue
        protected = list(range(n - min(l, budget), n))
        free = [i for i in range(n) if i not in protected]
        # best subset: max total score, then prefer newer rows (lexicographically larger)
        best = max(
            itertools.combinations(free, budget - len(protected)),
            key=lambda c: (sum(scores[list(c)]), sorted(c, reverse=True)),
        )
        assert got == sorted(list(best) + protected)


def test_evict_prefill_hidden_cases():
    trace = np.random.default_rng(1).random((2, 3, 10))
    assert P.evict_prefill_hidden(10, 10, trace, 3).tolist() == list(range(10))
    uniform = np.full((2, 3, 10), 0.1)
    assert P.evict_prefill_hidden(10, 6, uniform, 3).tolist() == [4, 5, 6, 7, 8, 9]


def test_evict_prefill_hidden_random_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(4, 12))
        trace = rng.random((3, 2, n))
        budget = int(rng.integers(2, n))
        got = P.evict_prefill_hidden(n, budget, trace, 2)
        mass = trace.sum(axis=(0, 1))
        tail = [n - 2, n - 1]
        top = sorted(range(n - 2), key=lambda i: -mass[i])[: budget - 2]
        assert got.tolist() == sorted(top + tail)


def test_plan_windows():
    plan = make_plan(2, 4, [512, 256])
    w = P.plan_windows(plan, 0, 4)
    assert w == [512, 512, 256, 256]
    single = make_plan(2, 4, [300])
    assert P.plan_windows(single, 1, 4) == [300] * 4
    remain = make_plan(2, 4, [512, 12])
    assert sorted(P.plan_windows(remain, 0, 4)) == [12, 12, 512, 512]
    with pytest.raises(PlanMismatch):
        P.plan_windows(plan, 0, 6)
    with pytest.raises(PlanMismatch):
        P.plan_windows(plan, 5, 4)


def test_remove_heads_takes_lowest_ranked():
    plan = make_plan(2, 4, [512, 256], votes=[[1, 4, 3, 2], [4, 3, 2, 1]])
    assert P.remove_heads(plan, 0) == [[], []]
    assert P.remove_heads(plan, 1) == [[0], [3]]
    assert P.remove_heads(plan, 2) == [[0, 3], [2, 3]]
    with pytest.raises(BadK):
        P.remove_heads(plan, 4)


def test_match_substitutes_identity():
    d = np.random.default_rng(3).random((4, 9))
    d[2] = d[0]
    assert P.match_substitutes(d, [2]) == {2: 0}


def test_match_substitutes_random_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        h = int(rng.integers(2, 8))
        d = rng.random((h, 12))
        removed = sorted(rng.choice(h, int(rng.integers(1, h)), replace=False).tolist())
        got = P.match_substitutes(d, removed)
        for r in removed:
            retained = [j for j in range(h) if j not in removed]
            dist = [1 - oracles.cosine_loop(d[r], d[j]) for j in retained]
            assert got[r] == retained[int(np.argmin(dist))]
            assert got[r] not in removed


def test_window_law_and_protected_suffix(toy, toy_plan):
    policy = P.UncompGroup(toy_plan)
    t = [Mo.BOS] + list(b"a reasonably long prompt so that windows overflow quickly here")
    res = Mo.prefill(toy, t, policy)
    cache = res.cache
    seen = len(t)
    tok = int(np.argmax(res.logits))
    for _ in range(40):
        step = Mo.decode_step(toy, cache, tok)
        seen += 1
        tok = int(np.argmax(step.logits))
        for i, layer in enumerate(cache.layers):
            for j, head in enumerate(layer):
                w = cache.windows[i][j]
                assert len(head) == min(w, seen)
                recent = np.arange(seen - cache.l, seen)
                assert set(recent) <= set(head.positions.tolist())
                assert head.history.shape == (min(cache.l, head.history.shape[0]), len(head))


def test_fullkv_never_evicts(toy):
    t = Mo.encode("full cache keeps everything")
    res = Mo.prefill(toy, t, P.FullKV())
    tok = 65
    for k in range(10):
        step = Mo.decode_step(toy, res.cache, tok)
        assert all(e is None for layer in step.evicted for e in layer)
        assert set(res.cache.head_lengths()[0]) == {len(t) + k + 1}


def test_extreme_k0_matches_group(toy, toy_plan):
    t = Mo.encode("extreme mode with zero removed heads")
    a = Mo.generate(toy, t, P.UncompGroup(toy_plan), steps=12)
    b = Mo.generate(toy, t, P.UncompExtreme(toy_plan, 0), steps=12)
    assert a == b
    ra = Mo.prefill(toy, t, P.UncompGroup(toy_plan))
    rb = Mo.prefill(toy, t, P.UncompExtreme(toy_plan, 0))
    assert np.array_equal(Mo.decode_step(toy, ra.cache, 66).logits, Mo.decode_step(toy, rb.cache, 66).logits)
    assert rb.cache.removal.is_empty()


def test_extreme_mode_substitution(toy, toy_plan):
    t = Mo.encode("extreme mode removes a head from every layer of this model")
    res = Mo.prefill(toy, t, P.UncompExtreme(toy_plan, 1))
    removal = res.cache.removal
    for i, removed in enumerate(removal.removed):
        assert len(removed) == 1
        for r, s in removal.substitute[i].items():
            assert s not in removed
            assert len(res.cache.layers[i][r]) == 0
            dists = res.traces[i].sum(axis=1)
            sims = [oracles.cosine_loop(dists[r], dists[j]) if j not in removed else -2 for j in range(4)]
            assert s == int(np.argmax(sims))
    before = removal.to_json()
    for _ in range(5):
        Mo.decode_step(toy, res.cache, 70)
    assert res.cache.removal.to_json() == before


def test_make_policy_names(toy_plan):
    assert P.make_policy("full").name == "full"
    assert P.make_policy("cumulative", window=10).window == 10
    assert P.make_policy("cumulative", plan=toy_plan).window == round(toy_plan.mean_window())
    assert isinstance(P.make_policy("uncomp-group", toy_plan), P.UncompGroup)
    stage = P.make_policy("uncomp-group-stage", toy_plan)
    assert stage.layer_budget(0) == toy_plan.layer_plan.group_sizes[0]
    assert P.make_policy("uncomp-extreme", toy_plan, k=1).k == 1
    with pytest.raises(ValueError):
        P.make_policy("h2o")
    with pytest.raises(ValueError):
        P.make_policy("uncomp-group")
