"""What an episode looks like: videos, masks, and the two settings.

The synthetic world stands in for a frozen video feature extractor.
Each class is a unit direction in embedding space; foreground snippets
cluster near a per-video rotated copy of it, background comes from a
shared mixture that includes a deliberate near-miss component per class.
"""

import numpy as np

from fstal.data import (SyntheticConfig, SyntheticWorld, rasterize_labels,
                        sample_episode)

world = SyntheticWorld(num_train=4, num_val=1, num_test=1,
                       config=SyntheticConfig(embedding_dim=16,
                                              num_snippets=50),
                       seed=7)
print("classes by split:")
for split in ("train", "val", "test"):
    print(f"  {split}: {world.classes(split)}")

print()
print("=" * 64)
print("one generated video")
print("=" * 64)
rng = np.random.default_rng(1)
label = world.classes("train")[0]
video = world.generate_video(label, rng)
print(f"id: {video.video_id}, duration {video.duration}s, "
      f"features {video.features.shape}")
for seg in video.segments:
    print(f"  segment [{seg.start:6.1f}, {seg.end:6.1f})s  label {seg.label}")

mask, l_fg, l_bg = rasterize_labels(video, label)
print(f"rasterized mask ({l_fg} fg / {l_bg} bg):")
print("  " + "".join("#" if m else "." for m in mask))

print()
print("=" * 64)
print("an episode: K support videos + one query, same class")
print("=" * 64)
pool = {c: [world.generate_video(c, rng, video_id=f"{c}-v{i}")
            for i in range(6)]
        for c in world.classes("train")}
episode = sample_episode(pool, k=5, rng=np.random.default_rng(2))
print(f"class: {episode.label}")
print(f"support: {[v.video_id for v in episode.support]}")
print(f"query: {episode.query.video_id} "
      "(labels are only consulted by meta-training and scoring)")

print()
print("=" * 64)
print("trimmed setting: support videos lose their background snippets")
print("=" * 64)
trimmed = sample_episode(pool, k=1, rng=np.random.default_rng(3),
                         setting="trimmed")
support = trimmed.support[0]
t_mask, t_fg, t_bg = rasterize_labels(support, trimmed.label)
print(f"trimmed support {support.video_id}: {support.num_snippets} snippets, "
      f"{t_fg} fg / {t_bg} bg (the background loss term vanishes)")
q_mask, q_fg, q_bg = rasterize_labels(trimmed.query, trimmed.label)
print(f"query stays untrimmed: {q_fg} fg / {q_bg} bg")
