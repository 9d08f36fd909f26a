"""A scaled-down run of the synthetic benchmark with its two headline
comparisons: query adaptation on/off, and 5-shot vs 1-shot.

The full-size version (20/2/3 classes, 500 episodes, 3 seeds) is what
the acceptance suite runs; this demo shrinks the episode counts so it
finishes in well under a minute while showing the same directions.
"""

import time

import numpy as np

from fstal.harness import qva_ablation, resolve_config
from fstal.localization import bootstrap_mean_ci

cfg = resolve_config("synthetic")
print(f"profile: {cfg.profile}  classes {cfg.train_classes}/"
      f"{cfg.val_classes}/{cfg.test_classes}  C={cfg.embedding_dim} "
      f"T={cfg.snippet_count}  K={cfg.k_shot}")

started = time.perf_counter()
out = qva_ablation(cfg, seeds=[0, 1], tasks=120, include_one_shot=True)
elapsed = time.perf_counter() - started

print(f"\nper-seed mean mAP ({elapsed:.0f}s):")
print(f"  {'seed':>4}  {'with adaptation':>16}  {'without':>8}  {'1-shot':>7}")
for row in out["per_seed"]:
    print(f"  {row['seed']:>4}  {row['qva_mean_map']:>16.4f}  "
          f"{row['base_mean_map']:>8.4f}  {row['qva_k1_mean_map']:>7.4f}")

mean, lo, hi = bootstrap_mean_ci(out["qva_base_diffs"], seed=0)
print(f"\npaired per-episode gain from query adaptation: {mean:+.4f}")
print(f"95% bootstrap CI: [{lo:+.4f}, {hi:+.4f}] "
      f"({'excludes' if lo > 0 else 'includes'} zero)")

k5 = float(np.mean(out["k_full"]))
k1 = float(np.mean(out["k_one"]))
print(f"\n5-shot mean mAP {k5:.4f} vs 1-shot {k1:.4f} "
      f"({'5-shot wins' if k5 >= k1 else '1-shot wins'})")
