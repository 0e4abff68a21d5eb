"""
Spectrum of the anharmonic oscillator and removal of the magnetic term
======================================================================

Run with ``python notebooks/01_spectrum_and_gauge.py``.
"""

# %%
import numpy as np

from qpreduce.config import load_config
from qpreduce.conjugation import apply_gauge
from qpreduce.spectral_basis import DiscretizationParams, PotentialSpec, build_basis, fit_eigenvalue_exponent

# %% [markdown]
# The eigenvalues of -d^2/dx^2 + |x|^(2 ell) grow like c j^d with d = 2 ell/(ell+1).
# Fit the exponent away from both ends of the retained block.

# %%
for ell, L in [(1.0, 16.0), (2.0, 8.0), (3.0, 6.0)]:
    b = build_basis(PotentialSpec(ell, (), L), DiscretizationParams(501), 120)
    d, c, rms = fit_eigenvalue_exponent(b, 20, 96)
    print(f"ell={ell:g}: d = {d:.4f} (expected {2 * ell / (ell + 1):.4f}), c = {c:.3f}")

# %% [markdown]
# The harmonic case is a sanity check: the error against 2j+1 grows once
# the eigenfunctions reach the edge of the box, not because of the solver.

# %%
for L in (12.0, 13.0, 14.0):
    b = build_basis(PotentialSpec(1.0, (), L), DiscretizationParams(2049), 120)
    err = np.abs(b.eigenvalues[:60] - (2 * np.arange(60) + 1))
    print(f"L={L:g}: max error for j<60 = {err.max():.1e}")

# %% [markdown]
# A first-order term epsilon (W1 p + p W1)/2 is removed by a multiplication
# gauge; what is left is a multiplication operator with a modified W0.

# %%
cfg = load_config("duffing-l2")
basis = build_basis(cfg.potential, cfg.discretization, cfg.n_modes)
g = apply_gauge(cfg.W0, cfg.W1, cfg.eps, cfg.omega, basis)
print(f"magnetic part: {g.magnetic_before:.3e} before, {g.magnetic_after:.3e} after")
print(f"distance to the assembled multiplication operator: {g.expected_deviation:.2e}")
