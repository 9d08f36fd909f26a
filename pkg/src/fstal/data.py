"""Untrimmed-video data model, episodic sampling, and synthetic data.

A video is a T x C matrix of per-snippet embeddings plus second-level
segment annotations. Snippet t covers the time span
[t * duration / T, (t + 1) * duration / T). Episodes pair K annotated
support videos with one query video of the same class; support and query
never share a video id.

The synthetic world stands in for a frozen feature extractor: each class
is a unit prototype direction, foreground snippets are a per-video
rotated copy of it plus noise, background snippets come from a shared
Gaussian mixture plus a per-video context shift. Segments are aligned to
snippet boundaries, so rasterization reproduces the generator's
foreground set exactly.

File formats (all little-endian / UTF-8 JSON):

* feature file: magic ``QATF``, u32 version=1, u32 T, u32 C, then T*C
  float32 values row-major; widened to float64 on load;
* annotation file: ``{"video_id", "duration_seconds", "segments":
  [{"start", "end", "label"}]}``;
* split manifest: ``{"class_name": "train" | "val" | "test"}``.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

FEATURE_MAGIC = b"QATF"
FEATURE_VERSION = 1


class FormatError(ValueError):
    """A data file violates its documented format."""


@dataclass(frozen=True)
class Segment:
    """One annotated action instance, in seconds."""

    start: float
    end: float
    label: str

    def __post_init__(self):
        if not (0.0 <= self.start < self.end):
            raise ValueError(
                f"segment must satisfy 0 <= start < end, got [{self.start}, {self.end})")
        if not self.label:
            raise ValueError("segment label must be non-empty")


@dataclass
class AnnotatedVideo:
    """Snippet embeddings plus segment-level annotation."""

    video_id: str
    duration: float
    features: np.ndarray          # T x C float64
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or min(self.features.shape) < 1:
            raise ValueError("features must be a T x C matrix with T, C >= 1")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        for seg in self.segments:
            if seg.end > self.duration + 1e-9:
                raise ValueError(
                    f"segment [{seg.start}, {seg.end}) exceeds duration {self.duration}")
        self.segments = sorted(self.segments, key=lambda s: (s.start, s.end))

    @property
    def num_snippets(self) -> int:
        return self.features.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.features.shape[1]

    def labels(self) -> set:
        return {seg.label for seg in self.segments}


@dataclass
class Episode:
    """One few-shot task: K labeled support videos and one query video."""

    label: str
    support: list
    query: AnnotatedVideo
    setting: str = "untrimmed"

    def __post_init__(self):
        k = len(self.support)
        if k not in (1, 5):
            raise ValueError(f"support size must be 1 or 5, got {k}")
        if self.setting not in ("trimmed", "untrimmed"):
            raise ValueError(f"unknown setting {self.setting!r}")
        ids = {v.video_id for v in self.support}
        if self.query.video_id in ids:
            raise ValueError("query video also appears in the support set")
        if self.setting == "untrimmed":
            for v in self.support:
                if self.label not in v.labels():
                    raise ValueError(
                        f"support video {v.video_id} has no {self.label!r} segment")

    @property
    def k_shot(self) -> int:
        return len(self.support)


def snippet_span(index: int, duration: float, num_snippets: int):
    """Time interval covered by one snippet."""
    width = duration / num_snippets
    return index * width, (index + 1) * width


def rasterize_labels(video: AnnotatedVideo, label: str):
    """Foreground/background mask for one class.

    A snippet is foreground iff at least half of its time span overlaps
    the union of this class's segments (ties go to foreground). Returns
    ``(mask, l_fg, l_bg)`` with ``l_fg + l_bg == T``.
    """
    t_count = video.num_snippets
    mask = np.zeros(t_count, dtype=np.int64)
    intervals = _merged_intervals(video, label)
    if intervals:
        width = video.duration / t_count
        for t in range(t_count):
            lo, hi = snippet_span(t, video.duration, t_count)
            covered = 0.0
            for s, e in intervals:
                covered += max(0.0, min(hi, e) - max(lo, s))
            if covered >= 0.5 * width:
                mask[t] = 1
    l_fg = int(mask.sum())
    return mask, l_fg, t_count - l_fg


def _merged_intervals(video: AnnotatedVideo, label: str):
    spans = sorted((s.start, s.end) for s in video.segments if s.label == label)
    merged = []
    for s, e in spans:
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def trim_to_foreground(video: AnnotatedVideo, label: str) -> AnnotatedVideo:
    """Keep only this class's foreground snippets (the trimmed protocol).

    The result is a shorter video whose single segment spans everything,
    so its rasterized mask is all foreground.
    """
    mask, l_fg, _ = rasterize_labels(video, label)
    if l_fg == 0:
        raise ValueError(f"video {video.video_id} has no {label!r} foreground")
    width = video.duration / video.num_snippets
    duration = l_fg * width
    return AnnotatedVideo(
        video_id=video.video_id + "#trimmed",
        duration=duration,
        features=video.features[mask.astype(bool)].copy(),
        segments=[Segment(0.0, duration, label)],
    )


def sample_episode(pool, k: int, rng: np.random.Generator,
                   setting: str = "untrimmed") -> Episode:
    """Sample one episode: a uniform class, then K+1 disjoint videos.

    ``pool`` maps class label -> list of AnnotatedVideo. Deterministic for
    a fixed generator state. In the trimmed setting support videos are
    trimmed to their foreground snippets; the query stays untrimmed.
    """
    if not pool:
        raise ValueError("empty video pool")
    labels = sorted(pool)
    label = labels[int(rng.integers(len(labels)))]
    videos = pool[label]
    if len(videos) < k + 1:
        raise ValueError(
            f"class {label!r} has {len(videos)} videos, needs at least {k + 1}")
    picks = rng.choice(len(videos), size=k + 1, replace=False)
    support = [videos[i] for i in picks[:k]]
    query = videos[picks[k]]
    if setting == "trimmed":
        support = [trim_to_foreground(v, label) for v in support]
    return Episode(label=label, support=support, query=query, setting=setting)


# ---------------------------------------------------------------------------
# synthetic worlds
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Generator knobs for one synthetic world.

    Noise scales are expected vector norms relative to the unit
    prototypes (an isotropic draw is scaled by 1/sqrt(C)), so 0.3 reads
    as 30% of the signal.
    """

    embedding_dim: int = 32
    num_snippets: int = 100
    duration: float = 120.0
    fg_noise: float = 0.3            # noise norm around the per-video prototype
    jitter_max_deg: float = 15.0     # per-video rotation of the prototype
    bg_components: int = 6           # generic mixture components
    bg_scale: float = 1.0            # norm of mixture component means
    bg_noise: float = 0.5
    context_shift: float = 0.5       # per-video offset added to background
    component_concentration: float = 0.4   # Dirichlet over per-video bg mix
    distractor_deg_range: tuple = (25.0, 50.0)  # per-class near-miss component
    segment_count_range: tuple = (1, 3)
    segment_len_frac: tuple = (0.08, 0.30)
    single_instance: bool = False


class SyntheticWorld:
    """A universe of classes with disjoint train/val/test splits.

    Prototypes are uniform unit vectors. The background mixture is shared
    by every class of the world and has two kinds of components: generic
    directions, and one near-miss "distractor" per class (the prototype
    rotated by a moderate angle), so every class faces confusable
    background content regardless of how the world's randomness falls.
    All generation is pure given (world, label, rng), so independent rng
    streams can run concurrently.
    """

    def __init__(self, num_train: int, num_val: int, num_test: int,
                 config: SyntheticConfig | None = None, seed: int = 0,
                 class_prefix: str = "syn"):
        if min(num_train, num_val, num_test) < 0 or num_train + num_val + num_test < 1:
            raise ValueError("class counts must be non-negative and total >= 1")
        self.config = config or SyntheticConfig()
        self.class_prefix = class_prefix
        self._seed_tag = zlib.crc32(class_prefix.encode("utf-8"))
        rng = np.random.default_rng([seed, 0xC1A55, self._seed_tag])
        total = num_train + num_val + num_test
        dim = self.config.embedding_dim
        protos = rng.normal(size=(total, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        names = [f"{class_prefix}-{i:03d}" for i in range(total)]
        self.prototypes = {n: protos[i] for i, n in enumerate(names)}
        self.splits = {}
        for i, n in enumerate(names):
            if i < num_train:
                self.splits[n] = "train"
            elif i < num_train + num_val:
                self.splits[n] = "val"
            else:
                self.splits[n] = "test"
        generic = rng.normal(size=(self.config.bg_components, dim))
        generic /= np.linalg.norm(generic, axis=1, keepdims=True)
        lo_deg, hi_deg = self.config.distractor_deg_range
        distractors = []
        for name in names:
            angle_rng_deg = rng.uniform(lo_deg, hi_deg)
            distractors.append(_rotate_exact(self.prototypes[name],
                                             rng, angle_rng_deg))
        self.bg_means = np.concatenate(
            [generic, np.asarray(distractors)], axis=0) * self.config.bg_scale

    @classmethod
    def from_total(cls, num_classes: int, **kwargs) -> "SyntheticWorld":
        """Split ``num_classes`` as 80% train / 10% val / rest test."""
        n_train = int(num_classes * 0.8)
        n_val = int(num_classes * 0.1)
        return cls(n_train, n_val, num_classes - n_train - n_val, **kwargs)

    def classes(self, split: str | None = None) -> list:
        names = sorted(self.prototypes)
        if split is None:
            return names
        return [n for n in names if self.splits[n] == split]

    def generate_video(self, label: str, rng: np.random.Generator,
                       video_id: str | None = None) -> AnnotatedVideo:
        """One untrimmed video of the class, annotations consistent with
        features by construction (segments align to snippet boundaries)."""
        if label not in self.prototypes:
            raise ValueError(f"unknown class {label!r}")
        cfg = self.config
        t_count, dim = cfg.num_snippets, cfg.embedding_dim
        proto = _rotate_toward_random(self.prototypes[label], rng,
                                      cfg.jitter_max_deg)
        fg_runs = self._draw_segment_runs(rng)
        fg_mask = np.zeros(t_count, dtype=bool)
        for lo, hi in fg_runs:
            fg_mask[lo:hi] = True

        root_dim = math.sqrt(dim)
        features = np.empty((t_count, dim))
        shift = rng.normal(size=dim) * (cfg.context_shift / root_dim)
        n_comp = self.bg_means.shape[0]
        mix = rng.dirichlet([cfg.component_concentration] * n_comp)
        comp = rng.choice(n_comp, size=t_count, p=mix)
        bg = (self.bg_means[comp]
              + rng.normal(size=(t_count, dim)) * (cfg.bg_noise / root_dim)
              + shift)
        features[:] = bg
        n_fg = int(fg_mask.sum())
        features[fg_mask] = proto + rng.normal(size=(n_fg, dim)) * (
            cfg.fg_noise / root_dim)

        width = cfg.duration / t_count
        segments = [Segment(lo * width, hi * width, label) for lo, hi in fg_runs]
        if video_id is None:
            video_id = f"{label}-v{rng.integers(1 << 30):08x}"
        return AnnotatedVideo(video_id=video_id, duration=cfg.duration,
                              features=features, segments=segments)

    def _draw_segment_runs(self, rng: np.random.Generator):
        """Non-overlapping foreground snippet runs, >= 1 snippet apart."""
        cfg = self.config
        t_count = cfg.num_snippets
        if cfg.single_instance:
            count = 1
        else:
            lo, hi = cfg.segment_count_range
            count = int(rng.integers(lo, hi + 1))
        runs = []
        attempts = 0
        while len(runs) < count and attempts < 50:
            attempts += 1
            frac = rng.uniform(*cfg.segment_len_frac)
            length = max(1, int(round(frac * t_count)))
            if length >= t_count:
                length = t_count - 2
            start = int(rng.integers(0, t_count - length + 1))
            span = (start, start + length)
            if all(span[1] + 1 <= lo or span[0] >= hi + 1 for lo, hi in runs):
                runs.append(span)
        if not runs:
            runs = [(0, max(1, t_count // 4))]
        return sorted(runs)

    def build_pool(self, split: str, videos_per_class: int, seed: int):
        """Deterministic pool: class -> list of generated videos."""
        pool = {}
        for ci, label in enumerate(self.classes(split)):
            rng = np.random.default_rng([seed, 0xB00F, self._seed_tag, ci])
            pool[label] = [
                self.generate_video(label, rng, video_id=f"{label}-v{j:03d}")
                for j in range(videos_per_class)
            ]
        return pool


def _rotate_toward_random(v: np.ndarray, rng: np.random.Generator,
                          max_deg: float) -> np.ndarray:
    """Rotate unit vector ``v`` by a random angle <= max_deg within the
    plane spanned by v and a random orthogonal direction."""
    if max_deg <= 0:
        return v.copy()
    return _rotate_exact(v, rng, rng.uniform(0.0, max_deg))


def _rotate_exact(v: np.ndarray, rng: np.random.Generator,
                  deg: float) -> np.ndarray:
    """Rotate unit vector ``v`` by exactly ``deg`` degrees toward a random
    orthogonal direction."""
    u = rng.normal(size=v.shape)
    u -= (u @ v) * v
    norm = np.linalg.norm(u)
    if norm < 1e-12:
        return v.copy()
    u /= norm
    theta = math.radians(deg)
    return math.cos(theta) * v + math.sin(theta) * u


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_feature_file(path, features: np.ndarray) -> None:
    """Write a T x C matrix as float32 (the storage width of the format)."""
    arr = np.ascontiguousarray(np.asarray(features), dtype="<f4")
    if arr.ndim != 2:
        raise FormatError("features must be 2-D")
    t_count, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t_count, dim))
        fh.write(arr.tobytes(order="C"))


def load_feature_file(path) -> np.ndarray:
    """Read a feature file, widening to float64. Shape is validated
    against the header; any mismatch is a FormatError."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"{path}: truncated header")
        version, t_count, dim = struct.unpack("<III", header)
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if t_count < 1 or dim < 1:
            raise FormatError(f"{path}: bad shape {t_count} x {dim}")
        payload = fh.read()
    expected = t_count * dim * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload) // (dim * 4)} rows, "
            f"header claims {t_count}")
    data = np.frombuffer(payload, dtype="<f4").reshape(t_count, dim)
    return data.astype(np.float64)


def write_annotations(path, video_id: str, duration: float, segments) -> None:
    doc = {
        "video_id": video_id,
        "duration_seconds": duration,
        "segments": [
            {"start": s.start, "end": s.end, "label": s.label} for s in segments
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_annotations(path):
    """Read one annotation file -> (video_id, duration, [Segment])."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        video_id = doc["video_id"]
        duration = float(doc["duration_seconds"])
        raw = doc["segments"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    segments = []
    for entry in raw:
        try:
            seg = Segment(float(entry["start"]), float(entry["end"]),
                          str(entry["label"]))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad segment {entry!r} ({exc})") from exc
        if seg.end > duration + 1e-9:
            raise FormatError(
                f"{path}: segment end {seg.end} exceeds duration {duration}")
        segments.append(seg)
    return video_id, duration, segments


def write_split_manifest(path, splits: dict) -> None:
    for split in splits.values():
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(splits, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest must map class -> split")
    for cls, split in doc.items():
        if split not in ("train", "val", "test"):
            raise FormatError(f"{path}: class {cls!r} has bad split {split!r}")
    return doc
