"""
Matrix entropy and effective rank
=================================

How many directions does a set of token vectors actually use? Build the
trace-one covariance, look at its spectrum, and read off the entropy.
"""

# %%
import numpy as np

from unccache import entropy as E

rng = np.random.default_rng(0)

# %% [markdown]
# Three token matrices with 64 rows in 16 dims: isotropic noise, a rank-3
# signal, and the rank-3 signal plus a little noise.

# %%
iso = rng.normal(size=(64, 16))
low = rng.normal(size=(64, 3)) @ rng.normal(size=(3, 16))
mixed = low + 0.05 * rng.normal(size=(64, 16))

for name, x in [("isotropic", iso), ("rank 3", low), ("rank 3 + noise", mixed)]:
    s = E.token_spectrum(x)
    k = E.resolve_k(s, "elbow")
    print(f"{name:15s} trace={s.eigenvalues.sum():.6f}  H={E.von_neumann_entropy(s):.3f}  "
          f"erank={E.effective_rank(s):6.2f}  elbow k={k:2d}  erank_k={E.truncated_erank(s, k):.2f}")

# %% [markdown]
# The full erank of the noisy matrix is pulled up by the many tiny noise
# modes; cutting at the elbow keeps only the leading directions.

# %%
s = E.token_spectrum(mixed)
print(np.round(s.eigenvalues, 4))

# %% [markdown]
# Renyi entropy approaches the von Neumann value as alpha -> 1.

# %%
h = E.von_neumann_entropy(s)
for alpha in (2.0, 1.1, 1.01, 1.001):
    print(f"alpha={alpha:<6} S={E.renyi_entropy(s, alpha):.6f}  gap={abs(E.renyi_entropy(s, alpha) - h):.2e}")

# %% [markdown]
# The trace form -tr(M log M) gives the same number without going through
# the eigenvalues by hand.

# %%
cov = E.covariance(mixed)
print(h, E.trace_form_entropy(cov))
