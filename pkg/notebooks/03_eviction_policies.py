"""
Eviction policies on a toy transformer
======================================

Run the same prompts under several cache policies and compare cache size and
agreement with the uncompressed model.
"""

# %%
from unccache import metrics as M
from unccache import model as Mo
from unccache import planner as PL
from unccache import policies as P

model = Mo.init_weights(Mo.ModelConfig(seed=3))
probes = [Mo.encode(t) for t in (
    "once upon a time there was a small cache that could not hold everything",
    "the quick brown fox jumps over the lazy dog and then does it again",
)]
plan = PL.build_plan(model, probes, PL.PlanConfig(s_max=64, s_min=24, s_i1=24, delta_s_h=8, groups=2, l=4))

# %%
policies = {
    "full": P.FullKV(),
    "cumulative w=16": P.CumulativeAttention(window=16, l=4),
    "uncomp-group": P.UncompGroup(plan),
    "uncomp-group-stage": P.UncompGroupStage(plan),
    "uncomp-extreme k=1": P.UncompExtreme(plan, 1),
}
print(f"{'policy':20s} {'agree':>6s} {'peak rows':>9s}  rate")
for name, pol in policies.items():
    res = M.agreement_probe(model, pol, probes, steps=12)
    windows = M.policy_windows(pol, model.config.n_layers, model.config.n_heads, model.config.max_context)
    print(f"{name:20s} {res.agreement:6.3f} {res.peak_rows:9d}  {M.compression_rate(windows, model.config.max_context)}")

# %% [markdown]
# Cache rows after one prefill: each head is trimmed to its own window.

# %%
res = Mo.prefill(model, probes[0], P.UncompGroup(plan))
for i, lengths in enumerate(res.cache.head_lengths()):
    print(i, lengths, res.cache.windows[i])

# %% [markdown]
# In extreme mode the dropped heads borrow the output of the head whose
# attention pattern is closest.

# %%
res = Mo.prefill(model, probes[0], P.UncompExtreme(plan, 1))
print(res.cache.removal.to_json())
