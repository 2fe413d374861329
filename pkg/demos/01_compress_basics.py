"""Compressing a handful of adapters into one shared pair of bases.

Run with ``python demos/01_compress_basics.py``.
"""
# %%
import numpy as np

from lora_jd import SolveOptions, compress, minimal_lossless_rank, relative_recon_error, solve
from lora_jd.synthetic import random_collection

# Five random rank-2 adapters on a 32-wide layer.
adapters = random_collection(5, 32, ranks=2, seed=0)
print("adapters:", len(adapters), "shapes B", adapters[0].b.shape, "A", adapters[0].a.shape)

# %%
# Stacking the factors says how wide the shared bases must be for a
# perfect fit: generic adapters need the sum of their ranks.
r_full = minimal_lossless_rank(adapters)
print("lossless shared rank:", r_full)

# %%
# JD-Full: orthonormal U, V and a small square Sigma_i per adapter.
for r in (r_full, r_full - 1, 4):
    col, rep = compress(adapters, SolveOptions(rank=r))
    _, mean = relative_recon_error(adapters, col)
    print(f"full  r={r:2d}  mean rel. error {mean:.3e}  iterations {rep.iterations_run}")

# %%
# JD-Diag keeps only a length-r vector per adapter. It is cheaper to
# store and serve. A converged JD-Full fit always has the lower objective
# (sum of squared errors), but Diag may spread its error unevenly and
# still win on the unweighted mean of per-adapter errors.
for r in (4, 8):
    tight = dict(max_iters=500, tolerance=1e-9)
    for mode in ("full", "diag"):
        col, rep = compress(adapters, SolveOptions(rank=r, mode=mode, **tight))
        per, mean = relative_recon_error(adapters, col)
        print(f"r={r} {mode}: objective {rep.objective_trace[-1]:.3f}  mean error {mean:.3f}  "
              f"per adapter {np.round(list(per.values()), 2)}")

# %%
# The objective trace starts at the initial bases and never goes up.
group, rep = solve(adapters, SolveOptions(rank=6, max_iters=15, tolerance=0.0))
print("objective trace:", np.round(rep.objective_trace, 5))

# %%
# The eigenvalue-iteration variant lands in the same place.
_, eig = solve(adapters, SolveOptions(rank=6, algorithm="eig"))
print(f"alternating {rep.objective_trace[-1]:.6f}  eigen-iteration {eig.objective_trace[-1]:.6f}")
