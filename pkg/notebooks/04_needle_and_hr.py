"""
Needle retrieval and H/R trend analysis
=======================================

A hand-wired copy model retrieves a needle perfectly with a full cache and
fails once the needle is evicted. Then check how well compressed key matrices
keep the per-layer entropy trend.
"""

# %%
from unccache import metrics as M
from unccache import model as Mo
from unccache import policies as P
from unccache.wired import previous_token_margin, wired_copy_model

wired = wired_copy_model()
print("previous-token logit margin at 512 positions:", round(previous_token_margin(512), 2))

depth, tokens, expected = next(M.needle_prompts(80, seed=1, placements=1))
print(Mo.decode_bytes(tokens[1:]).decode())
print("needle:", bytes(expected).decode())

# %%
for name, pol in [("full", P.FullKV()), ("window 16", P.CumulativeAttention(window=16, l=4))]:
    rep = M.needle_task(wired, pol, haystack_len=200, seed=1, max_depth=0.8)
    print(f"{name:10s} hit rate {rep.hit_rate:.2f}")

# %% [markdown]
# H/R: keep H heavy-hitter rows plus R recent rows of every key matrix and
# correlate the per-layer erank trend with the uncompressed one.

# %%
toy = Mo.init_weights(Mo.ModelConfig(seed=0))
text = Mo.encode("a fairly long sentence so that the key matrices have enough rows to compress in several ways")
res = M.hr_trend_analysis(toy, text, [(4, 12), (12, 4), (8, 8), (24, 24)])
print("full trend:", [round(v, 3) for v in res.full_trend])
for label, r in res.pearson_by_ratio.items():
    print(f"H/R {label:6s} pearson {r:+.3f}")
