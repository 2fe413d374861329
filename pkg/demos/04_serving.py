"""Serving a mixed batch without per-row adapter matmuls.

Run with ``python demos/04_serving.py``.
"""
# %%
import numpy as np

from lora_jd import (Batch, ClusterOptions, SolveOptions, cluster_solve, flop_estimate, forward_compressed,
                     forward_dense_reference)
from lora_jd.synthetic import random_collection

adapters = random_collection(12, 64, ranks=4, seed=2)
col, _ = cluster_solve(adapters, ClusterOptions(k=3, per_cluster=SolveOptions(rank=8, mode="diag")))

# %%
# Each row of the batch asks for a different adapter.
rng = np.random.default_rng(0)
ids = [adapters.ids[k] for k in rng.integers(len(adapters), size=8)]
batch = Batch(rng.standard_normal((8, 5, 64)), ids)

# %%
# Rows are grouped by cluster; V^T x and U t are shared matmuls and the
# only per-row work is scaling by the adapter's Sigma.
ops = []
y = forward_compressed(batch, col, ops=ops)
for op in ops:
    print(op)

# %%
ref = forward_dense_reference(batch, col)
print("float32 path vs dense float64:", np.max(np.abs(y - ref)) / np.max(np.abs(ref)))
print("multiply counts:", flop_estimate(batch, col, lora_rank=4))
