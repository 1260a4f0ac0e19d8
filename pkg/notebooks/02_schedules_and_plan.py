"""
From entropy profile to compression plan
========================================

Calibrate a toy model, split its layers where the query erank drops, and
assign per-head windows.
"""

# %%
import numpy as np

from unccache import model as Mo
from unccache import planner as PL
from unccache.metrics import compression_rate

model = Mo.init_weights(Mo.ModelConfig(n_layers=6, seed=0))
texts = [
    "the river bends twice before it reaches the old mill",
    "prices rose 3.5% in march and fell again by june",
    "def f(x):\n    return x * x + 1",
    "a list of colours: red, green, blue, cyan, magenta",
]
calibration = [Mo.encode(t) for t in texts]

# %% [markdown]
# Per-layer truncated erank of the query matrices, averaged over heads and
# calibration texts.

# %%
profile = PL.profile_layers(model, calibration)
for i, v in enumerate(profile.per_layer):
    print(f"layer {i}: {v:.3f}")

# %% [markdown]
# Boundaries sit where the profile drops by more than epsilon. With random
# weights the drops are small, so force the group count instead.

# %%
print("eps=0.05 boundaries:", PL.partition_layers(profile, 0.05))
print("3 groups:", PL.boundaries_for_groups(profile, 3))
print("layer sizes:", PL.layer_schedule(3, 256, 64))

# %% [markdown]
# Published-scale schedules come out of the same arithmetic.

# %%
print(PL.layer_schedule(5, 4096, 1536))
print(PL.layer_schedule(5, 8096, 1536))
print(PL.layer_schedule(8, 4096, 1536))
print(PL.head_schedule(512, 2, 256), PL.head_schedule(512, 5, 64))

# %% [markdown]
# A full plan: votes rank heads inside each layer, the top half gets the
# larger window.

# %%
cfg = PL.PlanConfig(s_max=256, s_min=64, s_i1=48, delta_s_h=16, groups=3)
plan = PL.build_plan(model, calibration, cfg)
print("votes:\n", np.array(plan.head_plan.votes))
print("windows:\n", plan.head_windows().astype(int))
print("mean window", plan.mean_window(), "->", compression_rate(plan, model.config.max_context), "% of full")
