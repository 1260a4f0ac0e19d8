"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` title; conftest prints a PASS/FAIL line for
every one of them in the terminal summary.
"""
import hashlib
import json
import math
import time

import numpy as np
import pytest

from unccache import cli
from unccache import entropy as E
from unccache import metrics as M
from unccache import model as Mo
from unccache import planner as PL
from unccache import policies as P
from unccache.wired import wired_copy_model

import oracles


def criterion(title):
    def mark(fn):
        fn.criterion = title
        return fn
    return mark


@pytest.fixture(scope="module")
def toy():
    return Mo.init_weights(Mo.ModelConfig(seed=11))


def seeded_prompt(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 64))
    return [Mo.BOS] + rng.integers(32, 127, n - 1).tolist()


def random_spectrum(rng):
    d = int(rng.integers(1, 65))
    vals = rng.dirichlet(np.ones(d) * rng.uniform(0.05, 3.0))
    if d > 2 and rng.random() < 0.3:
        vals[rng.choice(d, int(rng.integers(1, d)), replace=False)] = 0.0
        vals = vals / vals.sum()
    return E.Spectrum.from_values(vals)


@criterion("01 entropy bounds and equality cases on 1000 spectra, < 5 s")
def test_criterion_01_entropy_bounds():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    for _ in range(1000):
        s = random_spectrum(rng)
        d = s.dim
        h = E.von_neumann_entropy(s)
        er = E.effective_rank(s)
        rank = s.numerical_rank()
        assert -1e-12 <= h <= math.log(d) + 1e-12
        assert 1 - 1e-12 <= er <= rank * (1 + 1e-12)
        assert rank <= d
        # equality cases: rank one gives H = 0, uniform gives H = ln D
        one_hot = E.Spectrum.from_values(np.eye(d)[0])
        assert abs(E.von_neumann_entropy(one_hot)) <= 1e-9
        assert abs(E.effective_rank(one_hot) - 1.0) <= 1e-9
        flat = E.Spectrum.from_values(np.full(d, 1.0 / d))
        assert abs(E.von_neumann_entropy(flat) - math.log(d)) <= 1e-9
        assert abs(E.effective_rank(flat) - d) <= 1e-9 * d
    assert time.perf_counter() - start < 5.0


@criterion("02 eigenvalue-form vs trace-form entropy within 1e-8 on 100 covariances")
def test_criterion_02_entropy_forms():
    rng = np.random.default_rng(2)
    for _ in range(100):
        d = int(rng.integers(2, 33))
        n = int(rng.integers(2, 80))
        cov = E.covariance(rng.normal(size=(n, d)) * rng.uniform(0.1, 5, d))
        assert abs(E.von_neumann_entropy(E.spectrum(cov)) - E.trace_form_entropy(cov)) <= 1e-8


@criterion("03 Renyi entropy tends to von Neumann as alpha -> 1 on 50 spectra")
def test_criterion_03_renyi_limit():
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = int(rng.integers(2, 65))
        s = E.Spectrum.from_values(rng.dirichlet(np.ones(d)))
        h = E.von_neumann_entropy(s)
        gaps = [abs(E.renyi_entropy(s, a) - h) for a in (1.1, 1.01, 1.001)]
        assert gaps[-1] < 1e-3
        assert gaps[0] > gaps[1] > gaps[2]


@criterion("04 covariance trace equals 1 within 1e-8 on 200 token matrices")
def test_criterion_04_covariance_trace():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(2, 100))
        d = int(rng.integers(1, 48))
        x = rng.normal(size=(n, d)) * rng.uniform(0.01, 100)
        if d == 1:
            x[0] += 1.0  # keep centred rows away from zero norm
        try:
            cov = E.covariance(x)
        except E.DegenerateInput:
            continue
        assert abs(np.trace(cov) - 1.0) <= 1e-8


@criterion("05 layer schedules: G=5 exact, G=8 within 1 token of the 13B schedule")
def test_criterion_05_schedules():
    assert PL.layer_schedule(5, 4096, 1536) == [4096, 3456, 2816, 2176, 1536]
    published = [4096, 3731, 3366, 3001, 2636, 2271, 1906, 1536]
    got = PL.layer_schedule(8, 4096, 1536)
    assert len(got) == 8
    assert all(abs(a - b) <= 1 for a, b in zip(got, published))


@criterion("06 compression rates 384/4096 -> 9.38 and 384/8096 -> 4.74")
def test_criterion_06_rates():
    assert M.compression_rate(384, 4096) == 9.38
    assert M.compression_rate(384, 8096) == 4.74
    windows = np.array([PL.head_schedule(512, 2, 256)] * 32).repeat(16, axis=1)
    assert M.compression_rate(windows, 4096) == 9.38


@criterion("07 head schedules {512, 256} and {512, 448, 384, 320, 256}")
def test_criterion_07_head_schedules():
    assert PL.head_schedule(512, 2, 256) == [512, 256]
    assert PL.head_schedule(512, 5, 64) == [512, 448, 384, 320, 256]


@criterion("08 decode eviction matches brute-force argmin over 10000 steps, < 30 s")
def test_criterion_08_eviction_oracle():
    rng = np.random.default_rng(8)
    start = time.perf_counter()
    steps = 0
    while steps < 10_000:
        window = int(rng.integers(1, 24))
        l = int(rng.integers(1, 9))
        head = P.HeadCache.empty(2)
        received = {}  # position -> list of (step, weight), kept independently of the cache
        for t in range(int(rng.integers(20, 80))):
            head.append(np.zeros(2, np.float32), np.zeros(2, np.float32), t)
            n = len(head)
            if rng.random() < 0.3:
                w = rng.integers(0, 3, n).astype(float) + 1e-3  # coarse weights force ties
            else:
                w = rng.random(n)
            w = w / w.sum()
            head.record(w, l)
            for pos, wt in zip(head.positions.tolist(), w):
                received.setdefault(pos, []).append((t, wt))
            idx = P.evict_decode(head, window, l)
            if n <= window:
                assert idx is None
            else:
                protected = min(l, window)
                cands = head.positions.tolist()[: n - protected]
                score = {p: sum(v for s, v in received[p] if s > t - l) for p in cands}
                best = min(cands, key=lambda p: (score[p], p))
                assert head.positions[idx] == best
                head.drop(idx)
            assert len(head) <= window
            steps += 1
    assert time.perf_counter() - start < 30.0


@criterion("09 FullKV logits bit-identical to the reference model on 20 prompts")
def test_criterion_09_fullkv_neutral(toy):
    for seed in range(20):
        t = seeded_prompt(seed)
        res = Mo.prefill(toy, t, P.FullKV())
        assert np.array_equal(res.logits, Mo.reference_forward(toy, t)[-1])


@criterion("10 incremental decode matches one-shot prefill within 1e-5 on 20 prompts")
def test_criterion_10_decode_consistency(toy):
    for seed in range(20):
        t = seeded_prompt(100 + seed)
        split = max(2, len(t) // 2)
        res = Mo.prefill(toy, t[:split], P.FullKV())
        ref = Mo.reference_forward(toy, t)
        np.testing.assert_allclose(res.logits, ref[split - 1], atol=1e-5)
        for i in range(split, len(t)):
            step = Mo.decode_step(toy, res.cache, t[i])
            np.testing.assert_allclose(step.logits, ref[i], atol=1e-5)


@criterion("11 substitute head = brute-force min cosine distance on 500 sets; k=0 is identity")
def test_criterion_11_substitution(toy):
    rng = np.random.default_rng(11)
    for _ in range(500):
        h = int(rng.integers(2, 12))
        n = int(rng.integers(1, 40))
        d = rng.dirichlet(np.ones(n), size=h)
        removed = sorted(rng.choice(h, int(rng.integers(1, h)), replace=False).tolist())
        got = P.match_substitutes(d, removed)
        retained = [j for j in range(h) if j not in removed]
        for r in removed:
            dist = [1.0 - oracles.cosine_loop(d[r], d[j]) for j in retained]
            assert got[r] == retained[min(range(len(dist)), key=lambda i: (dist[i], i))]
    cal = [Mo.encode("calibration sentence %d for the extreme mode check" % i) for i in range(3)]
    plan = PL.build_plan(toy, cal, PL.PlanConfig(s_max=48, s_min=16, s_i1=20, delta_s_h=8, l=4))
    for seed in range(5):
        t = seeded_prompt(200 + seed)
        a = Mo.prefill(toy, t, P.UncompGroup(plan))
        b = Mo.prefill(toy, t, P.UncompExtreme(plan, 0))
        assert np.array_equal(a.logits, b.logits)
        for tok in (65, 66, 67):
            assert np.array_equal(Mo.decode_step(toy, a.cache, tok).logits, Mo.decode_step(toy, b.cache, tok).logits)


@criterion("12 H/R self-correlation is 1.0 and trends recompute from dumps within 1e-10")
def test_criterion_12_hr_analysis(toy, tmp_path):
    t = Mo.encode("entropy trends across layers under history and recent row budgets")
    res = M.hr_trend_analysis(toy, t, [(8, 16), (16, 8), (4, 4)])
    assert E.pearson(res.full_trend, res.full_trend) == 1.0
    M.write_trend_csv(tmp_path / "full.csv", res.full_trend)
    full = M.read_trend_csv(tmp_path / "full.csv")
    for label, trend in res.trends.items():
        path = tmp_path / (label.replace("/", "_") + ".csv")
        M.write_trend_csv(path, trend)
        again = oracles.pearson_loop(M.read_trend_csv(path), full)
        assert abs(again - res.pearson_by_ratio[label]) <= 1e-10


@criterion("13 wired copy model: needle hit rate 1.0 with FullKV and 0 under forced eviction")
def test_criterion_13_wired_needle():
    model = wired_copy_model()
    full = M.needle_task(model, P.FullKV(), haystack_len=200, seed=13)
    assert full.hit_rate == 1.0
    evicted = M.needle_task(model, P.CumulativeAttention(window=16, l=4), haystack_len=200, seed=13, max_depth=0.8)
    assert evicted.hit_rate == 0.0


def _pipeline(root):
    root.mkdir()
    (root / "corpus.txt").write_text("\n".join(
        f"calibration document {i}: the quick brown fox {i * 7} jumps over a lazy dog" for i in range(6)
    ) + "\n")
    assert cli.main(["gen-model", "--config", "tiny", "--seed", "5", "--out", str(root / "m.unct")]) == 0
    assert cli.main(["calibrate", "--model", str(root / "m.unct"), "--corpus", str(root / "corpus.txt"),
                     "--out", str(root / "calib.json")]) == 0
    assert cli.main(["plan", "--model", str(root / "m.unct"), "--calibration", str(root / "calib.json"),
                     "--smax", "96", "--smin", "32", "--si1", "40", "--dsh", "16", "--out", str(root / "plan.json")]) == 0
    run = {"model": "m.unct", "plan": "plan.json", "policy": "uncomp-group", "probes": "corpus.txt",
           "out": "report.json", "steps": 6, "ratios": [[8, 16]], "seed": 5}
    (root / "run.json").write_text(json.dumps(run))
    assert cli.main(["--threads", "2", "run", "--config", str(root / "run.json")]) == 0
    return [hashlib.sha256((root / f).read_bytes()).hexdigest() for f in ("plan.json", "report.json")]


@criterion("14 calibrate -> plan -> run twice gives byte-identical plan and report")
def test_criterion_14_determinism(tmp_path):
    assert _pipeline(tmp_path / "a") == _pipeline(tmp_path / "b")
