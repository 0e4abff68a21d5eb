"""
Reducing a quasi-periodically forced quartic oscillator
========================================================

Run with ``python notebooks/02_kam_reduction.py`` (about half a minute).
"""

# %%
import numpy as np

from qpreduce.config import load_config
from qpreduce.pipeline import run_pipeline, shift_exponent

cfg = load_config("duffing-l2")
res = run_pipeline(cfg, simulate=False)
kam = res.objects["kam"]
basis = res.objects["basis"]

# %% [markdown]
# Each step squares the size of the off-diagonal perturbation, up to the
# divisor losses: theta_n = log eps_{n+1} / log eps_n.

# %%
for step in kam.trace:
    print(f"step {step.step_index}: eps = {step.eps:.3e}")
print("theta:", np.round(kam.theta(), 2))

# %% [markdown]
# The frequencies move by O(eps j^(beta/(ell+1))).

# %%
shift = kam.lambda_inf - basis.eigenvalues
N = basis.n_modes
slope, _ = shift_exponent(kam.lambda_inf, basis.eigenvalues, 10, int(0.8 * N))
print(f"fitted growth of |shift_j|: j^{slope:.3f} (bound {cfg.beta / (cfg.potential.ell + 1):.3f})")
for j in (0, 10, 20, 40):
    print(f"j={j:2d}: lambda_v = {basis.eigenvalues[j]:10.5f}, shift/eps = {shift[j] / cfg.eps:+.4f}")
