"""Energy bounds of a JD-Full solution, and what compression saves.

Run with ``python demos/03_bounds_and_accounting.py``.
"""
# %%
from lora_jd import CompressionSetting, Setting, SolveOptions, gpu_usage_ratio, param_count, saved_ratio, solve
from lora_jd import theorem_bounds
from lora_jd.synthetic import random_collection

adapters = random_collection(10, 16, ranks=2, seed=1)
group, _ = solve(adapters, SolveOptions(rank=3, normalize=False))
rep = theorem_bounds(adapters, group)

# %%
# The kept energy sum_i ||Sigma_i||^2 sits below the top-min(r^2, n)
# energy of the stacked products. The merged-adapter energy is only a
# valid floor after dividing by n: n identical adapters already break
# the undivided version.
for key, value in rep.as_dict().items():
    print(f"{key:16s} {value:.4f}" if isinstance(value, float) else f"{key:16s} {value}")
print("holds (with lower / n):", rep.holds(), "| undivided violations:", rep.violations(use_corrected=False))

# %%
# Parameter counts for one 4096-wide module.
D = 4096
settings = [
    ("rank-16 LoRA x 64", CompressionSetting(Setting.BASELINE16, 64, D)),
    ("SVD rank 8 x 64", CompressionSetting(Setting.SVD, 64, D, rank=8)),
    ("JD-Full rank 64", CompressionSetting(Setting.JD_FULL, 64, D, rank=64)),
    ("JD-Diag rank 256", CompressionSetting(Setting.JD_DIAG, 64, D, rank=256)),
    ("25 clusters rank 16", CompressionSetting(Setting.CLUSTERED, 512, D, rank=16, clusters=25)),
]
for name, s in settings:
    print(f"{name:22s} params {param_count(s):>11,d}  saved {saved_ratio(s):+.3f}  "
          f"same memory as {gpu_usage_ratio(s):7.3f} rank-16 LoRAs")
