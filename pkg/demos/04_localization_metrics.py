"""From per-snippet probabilities to segments, and how they are scored.

The decode rule: maximal runs of snippets at or above the threshold form
candidates; each candidate's confidence is its best snippet. Soft
suppression then decays overlapping candidates (never moving boundaries,
never raising scores) and the top N survivors are scored against ground
truth at several tIoU thresholds.
"""

import numpy as np

from fstal.localization import (Candidate, EvalConfig, average_precision,
                                decode_segments, map_report, score_episode,
                                soft_nms, tiou)

cfg = EvalConfig(snippet_threshold=0.5, nms_sigma=0.5, nms_cutoff=0.3,
                 top_n=10)

print("=" * 64)
print("decoding runs of confident snippets")
print("=" * 64)
scores = np.array([.1, .9, .8, .2, .95, .1, .6, .7, .3, .1])
print("scores:   " + " ".join(f"{s:.2f}" for s in scores))
print("above?    " + "  ".join("#" if s >= 0.5 else "." for s in scores))
cands = decode_segments(scores, duration=100.0, cfg=cfg)
for c in cands:
    print(f"  candidate [{c.start:5.1f}, {c.end:5.1f})s score {c.score:.2f}")

print()
print("=" * 64)
print("soft suppression: overlap decays scores by exp(-tIoU^2 / sigma)")
print("=" * 64)
overlapping = [Candidate(0, 10, 0.9), Candidate(2, 12, 0.85),
               Candidate(40, 50, 0.8)]
for a in overlapping:
    print(f"  in : [{a.start:4.1f}, {a.end:4.1f}) {a.score:.3f}")
for a in soft_nms(overlapping, sigma=0.5, cutoff=0.0):
    print(f"  out: [{a.start:4.1f}, {a.end:4.1f}) {a.score:.3f}")
dup = soft_nms([Candidate(0, 10, 0.9), Candidate(0, 10, 0.8)],
               sigma=0.5, cutoff=0.0)
print(f"exact duplicate decays to 0.8*exp(-2) = {dup[1].score:.5f}")

print()
print("=" * 64)
print("tIoU and average precision")
print("=" * 64)
print(f"tiou([0,10], [5,15]) = {tiou((0, 10), (5, 15)):.4f}")
gts = [(10.0, 30.0), (40.0, 50.0)]
preds = [Candidate(11, 29, 0.95), Candidate(70, 80, 0.9),
         Candidate(41, 49, 0.85)]
for thr in (0.5, 0.7, 0.9):
    ap = average_precision(preds, gts, thr)
    print(f"  AP@{thr}: {ap:.4f}")

print()
print("=" * 64)
print("a small mAP report over episodes")
print("=" * 64)
rng = np.random.default_rng(0)
results = []
for i in range(5):
    gt_start = float(rng.uniform(0, 60))
    gt = [(gt_start, gt_start + rng.uniform(10, 30))]
    jitter = float(rng.uniform(-4, 4))
    preds = [Candidate(max(0.0, gt[0][0] + jitter), gt[0][1] + jitter,
                       float(rng.uniform(0.7, 1.0)))]
    results.append(score_episode(f"ep{i}", "demo", preds, gt, cfg))
report = map_report(results, cfg)
for key, value in report.items():
    print(f"  {key}: {value:.4f}")
