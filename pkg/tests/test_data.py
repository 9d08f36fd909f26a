"""Tests for the data model, sampling, the synthetic world, and file IO."""

import math

import numpy as np
import pytest

from fstal import data as dt
from fstal import model as md


def video_with(segments, duration=100.0, t_count=10, dim=4, video_id="v"):
    feats = np.zeros((t_count, dim))
    return dt.AnnotatedVideo(video_id, duration, feats, segments)


class TestSegmentAndVideo:
    def test_segment_validation(self):
        with pytest.raises(ValueError):
            dt.Segment(5.0, 5.0, "a")
        with pytest.raises(ValueError):
            dt.Segment(-1.0, 5.0, "a")
        with pytest.raises(ValueError):
            dt.Segment(1.0, 5.0, "")

    def test_video_sorts_segments(self):
        v = video_with([dt.Segment(50.0, 60.0, "a"), dt.Segment(10.0, 20.0, "a")])
        assert [s.start for s in v.segments] == [10.0, 50.0]

    def test_segment_beyond_duration_rejected(self):
        with pytest.raises(ValueError, match="exceeds duration"):
            video_with([dt.Segment(90.0, 111.0, "a")])

    def test_episode_disjointness(self):
        a = video_with([dt.Segment(0.0, 100.0, "c")], video_id="a")
        with pytest.raises(ValueError, match="query video also appears"):
            dt.Episode(label="c", support=[a], query=a)

    def test_episode_k_restricted(self):
        vids = [video_with([dt.Segment(0.0, 100.0, "c")], video_id=f"v{i}")
                for i in range(4)]
        with pytest.raises(ValueError, match="1 or 5"):
            dt.Episode(label="c", support=vids[:3], query=vids[3])

    def test_untrimmed_support_needs_class_segment(self):
        a = video_with([dt.Segment(0.0, 10.0, "other")], video_id="a")
        q = video_with([dt.Segment(0.0, 10.0, "c")], video_id="q")
        with pytest.raises(ValueError, match="no 'c' segment"):
            dt.Episode(label="c", support=[a], query=q)


class TestRasterizeLabels:
    def test_full_cover_all_ones(self):
        v = video_with([dt.Segment(0.0, 100.0, "a")])
        mask, l_fg, l_bg = dt.rasterize_labels(v, "a")
        assert mask.tolist() == [1] * 10
        assert (l_fg, l_bg) == (10, 0)

    def test_majority_rule_with_ties_to_foreground(self):
        # duration 100, T=10, segment [25, 45): snippet 2 overlaps 5/10
        # (tie -> fg), 3 fully, 4 exactly half (tie -> fg)
        v = video_with([dt.Segment(25.0, 45.0, "a")])
        mask, l_fg, l_bg = dt.rasterize_labels(v, "a")
        assert np.flatnonzero(mask).tolist() == [2, 3, 4]
        assert l_fg + l_bg == 10

    def test_other_labels_ignored(self):
        v = video_with([dt.Segment(0.0, 100.0, "b")])
        mask, l_fg, _ = dt.rasterize_labels(v, "a")
        assert l_fg == 0 and mask.sum() == 0

    def test_random_layouts_match_overlap_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t_count = int(rng.integers(5, 40))
            duration = float(rng.uniform(30, 300))
            segments = []
            for _ in range(int(rng.integers(1, 4))):
                s = rng.uniform(0, duration * 0.9)
                e = rng.uniform(s + 0.01, duration)
                segments.append(dt.Segment(s, e, "a"))
            v = video_with(segments, duration=duration, t_count=t_count)
            mask, l_fg, l_bg = dt.rasterize_labels(v, "a")
            assert l_fg + l_bg == t_count
            width = duration / t_count
            for t in range(t_count):
                lo, hi = t * width, (t + 1) * width
                # oracle: sweep the snippet in small steps and measure
                # covered length against the raw segment list
                grid = np.linspace(lo, hi, 2001)[:-1] + width / 4000.0
                covered = np.zeros_like(grid, dtype=bool)
                for seg in segments:
                    covered |= (grid >= seg.start) & (grid < seg.end)
                frac = covered.mean()
                if abs(frac - 0.5) > 1e-3:   # skip knife-edge grid error
                    assert mask[t] == (1 if frac >= 0.5 else 0), (
                        f"snippet {t}: grid fraction {frac}")


class TestTrimToForeground:
    def test_trimmed_video_is_all_foreground(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(10, 3))
        v = dt.AnnotatedVideo("x", 100.0, feats, [dt.Segment(25.0, 45.0, "a")])
        trimmed = dt.trim_to_foreground(v, "a")
        mask, l_fg, l_bg = dt.rasterize_labels(trimmed, "a")
        assert l_bg == 0 and l_fg == trimmed.num_snippets == 3
        np.testing.assert_array_equal(trimmed.features, feats[2:5])

    def test_no_foreground_rejected(self):
        v = video_with([dt.Segment(0.0, 1.0, "a")])
        with pytest.raises(ValueError, match="no 'b' foreground"):
            dt.trim_to_foreground(v, "b")


class TestSampleEpisode:
    def _pool(self, classes=3, per_class=6, t_count=8):
        pool = {}
        for c in range(classes):
            label = f"c{c}"
            pool[label] = [
                video_with([dt.Segment(0.0, 40.0, label)], duration=80.0,
                           t_count=t_count, video_id=f"{label}-v{i}")
                for i in range(per_class)
            ]
        return pool

    def test_exact_k_plus_one_uses_whole_class(self):
        pool = self._pool(1, 6)
        ep = dt.sample_episode(pool, 5, np.random.default_rng(0))
        ids = {v.video_id for v in ep.support} | {ep.query.video_id}
        assert len(ids) == 6
        assert ep.query.video_id not in {v.video_id for v in ep.support}

    def test_same_seed_identical_episode(self):
        pool = self._pool()
        a = dt.sample_episode(pool, 5, np.random.default_rng(7))
        b = dt.sample_episode(pool, 5, np.random.default_rng(7))
        assert a.label == b.label
        assert [v.video_id for v in a.support] == [v.video_id for v in b.support]
        assert a.query.video_id == b.query.video_id

    def test_insufficient_videos_names_class(self):
        pool = {"tiny": self._pool(1, 3)["c0"]}
        with pytest.raises(ValueError, match="tiny"):
            dt.sample_episode(pool, 5, np.random.default_rng(0))

    def test_class_frequencies_near_uniform(self):
        pool = self._pool(classes=5, per_class=2)
        rng = np.random.default_rng(11)
        counts = {f"c{c}": 0 for c in range(5)}
        n = 10000
        for _ in range(n):
            counts[dt.sample_episode(pool, 1, rng).label] += 1
        p = 1.0 / 5.0
        sigma = math.sqrt(n * p * (1 - p))
        for label, count in counts.items():
            assert abs(count - n * p) < 3.0 * sigma, (label, count)

    def test_trimmed_setting_trims_support_only(self):
        pool = self._pool()
        ep = dt.sample_episode(pool, 1, np.random.default_rng(3),
                               setting="trimmed")
        mask, _, l_bg = dt.rasterize_labels(ep.support[0], ep.label)
        assert l_bg == 0
        _, _, q_bg = dt.rasterize_labels(ep.query, ep.label)
        assert q_bg > 0


class TestSyntheticWorld:
    def test_split_partition_disjoint(self):
        world = dt.SyntheticWorld(8, 1, 1, seed=0)
        splits = [world.splits[c] for c in world.classes()]
        assert splits.count("train") == 8
        assert splits.count("val") == 1
        assert splits.count("test") == 1
        assert (set(world.classes("train")) & set(world.classes("val"))
                & set(world.classes("test")) == set())

    def test_from_total_80_10_10(self):
        world = dt.SyntheticWorld.from_total(25, seed=0)
        assert len(world.classes("train")) == 20
        assert len(world.classes("val")) == 2
        assert len(world.classes("test")) == 3

    def test_zero_noise_foreground_equals_prototype(self):
        cfg = dt.SyntheticConfig(embedding_dim=8, num_snippets=20,
                                 fg_noise=0.0, jitter_max_deg=0.0)
        world = dt.SyntheticWorld(1, 1, 1, cfg, seed=1)
        label = world.classes("train")[0]
        video = world.generate_video(label, np.random.default_rng(2))
        mask, _, _ = dt.rasterize_labels(video, label)
        fg = video.features[mask.astype(bool)]
        for row in fg:
            np.testing.assert_allclose(row, world.prototypes[label],
                                       atol=1e-12)

    def test_rasterization_reproduces_generator_mask(self):
        world = dt.SyntheticWorld(2, 1, 1, seed=3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            label = world.classes("train")[int(rng.integers(2))]
            video = world.generate_video(label, rng)
            mask, _, _ = dt.rasterize_labels(video, label)
            # generator marks fg by construction: recover it from features
            # being near-prototype is fragile, so recompute from segments
            width = video.duration / video.num_snippets
            expected = np.zeros(video.num_snippets, dtype=int)
            for seg in video.segments:
                expected[int(round(seg.start / width)):
                         int(round(seg.end / width))] = 1
            np.testing.assert_array_equal(mask, expected)

    def test_unknown_class_rejected(self):
        world = dt.SyntheticWorld(1, 1, 1, seed=5)
        with pytest.raises(ValueError, match="unknown class"):
            world.generate_video("nope", np.random.default_rng(0))

    def test_single_instance_profile(self):
        cfg = dt.SyntheticConfig(single_instance=True)
        world = dt.SyntheticWorld(1, 1, 1, cfg, seed=6)
        label = world.classes("train")[0]
        rng = np.random.default_rng(7)
        for _ in range(10):
            assert len(world.generate_video(label, rng).segments) == 1

    def test_mean_fg_classifier_auc_above_gate(self):
        # generator-default gate: a mean-foreground classifier built from
        # one video must separate fg/bg on a fresh video with AUC > 0.9
        world = dt.SyntheticWorld(10, 1, 1, seed=8)
        rng = np.random.default_rng(9)
        aucs = []
        for _ in range(1000):
            label = world.classes("train")[int(rng.integers(10))]
            sup = world.generate_video(label, rng)
            qry = world.generate_video(label, rng)
            smask, _, _ = dt.rasterize_labels(sup, label)
            weights = md.init_from_support([(sup.features, smask)])
            probs = md.classify_snippets(weights, qry.features)
            qmask, _, _ = dt.rasterize_labels(qry, label)
            pos = probs[qmask.astype(bool)]
            neg = probs[~qmask.astype(bool)]
            ranks = np.concatenate([pos, neg]).argsort().argsort() + 1
            auc = ((ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2)
                   / (len(pos) * len(neg)))
            aucs.append(auc)
        assert float(np.mean(aucs)) > 0.9

    def test_pool_determinism(self):
        world = dt.SyntheticWorld(2, 1, 1, seed=10)
        p1 = world.build_pool("train", 3, seed=5)
        p2 = world.build_pool("train", 3, seed=5)
        for label in p1:
            for a, b in zip(p1[label], p2[label]):
                assert a.video_id == b.video_id
                assert a.features.tobytes() == b.features.tobytes()

    def test_different_prefix_different_world(self):
        w1 = dt.SyntheticWorld(2, 1, 1, seed=0, class_prefix="syn")
        w2 = dt.SyntheticWorld(2, 1, 1, seed=0, class_prefix="synb")
        assert set(w1.prototypes) & set(w2.prototypes) == set()
        p1 = next(iter(w1.prototypes.values()))
        p2 = next(iter(w2.prototypes.values()))
        assert not np.allclose(p1, p2)


class TestFeatureFiles:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(12)
        # float32-representable values survive the storage width exactly
        original = rng.normal(size=(17, 5)).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.qatf"
        dt.write_feature_file(path, original)
        loaded = dt.load_feature_file(path)
        assert loaded.dtype == np.float64
        assert loaded.tobytes() == original.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.qatf"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(dt.FormatError, match="bad magic"):
            dt.load_feature_file(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.qatf"
        dt.write_feature_file(path, np.zeros((100, 3)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-12])   # drop one row
        with pytest.raises(dt.FormatError, match="header claims 100"):
            dt.load_feature_file(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.qatf"
        path.write_bytes(b"QATF\x01\x00")
        with pytest.raises(dt.FormatError, match="truncated header"):
            dt.load_feature_file(path)

    def test_unsupported_version(self, tmp_path):
        import struct
        path = tmp_path / "v9.qatf"
        path.write_bytes(b"QATF" + struct.pack("<III", 9, 1, 1) + b"\x00" * 4)
        with pytest.raises(dt.FormatError, match="version"):
            dt.load_feature_file(path)


class TestAnnotationFiles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "v.json"
        segs = [dt.Segment(1.5, 9.25, "jump"), dt.Segment(20.0, 30.0, "jump")]
        dt.write_annotations(path, "vid-1", 60.0, segs)
        video_id, duration, loaded = dt.load_annotations(path)
        assert video_id == "vid-1" and duration == 60.0
        assert [(s.start, s.end, s.label) for s in loaded] == \
               [(1.5, 9.25, "jump"), (20.0, 30.0, "jump")]

    def test_end_beyond_duration_rejected(self, tmp_path):
        path = tmp_path / "v.json"
        path.write_text('{"video_id": "x", "duration_seconds": 10,'
                        ' "segments": [{"start": 2, "end": 12, "label": "a"}]}')
        with pytest.raises(dt.FormatError, match="exceeds duration"):
            dt.load_annotations(path)

    def test_not_json_rejected(self, tmp_path):
        path = tmp_path / "v.json"
        path.write_text("not json {")
        with pytest.raises(dt.FormatError, match="not valid JSON"):
            dt.load_annotations(path)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "v.json"
        path.write_text('{"video_id": "x"}')
        with pytest.raises(dt.FormatError, match="missing field"):
            dt.load_annotations(path)

    def test_invalid_segment_rejected(self, tmp_path):
        path = tmp_path / "v.json"
        path.write_text('{"video_id": "x", "duration_seconds": 10,'
                        ' "segments": [{"start": 5, "end": 2, "label": "a"}]}')
        with pytest.raises(dt.FormatError, match="bad segment"):
            dt.load_annotations(path)


class TestSplitManifest:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "splits.json"
        splits = {"a": "train", "b": "val", "c": "test"}
        dt.write_split_manifest(path, splits)
        assert dt.load_split_manifest(path) == splits

    def test_bad_split_value_rejected(self, tmp_path):
        path = tmp_path / "splits.json"
        path.write_text('{"a": "holdout"}')
        with pytest.raises(dt.FormatError, match="bad split"):
            dt.load_split_manifest(path)

    def test_write_validates(self, tmp_path):
        with pytest.raises(ValueError, match="unknown split"):
            dt.write_split_manifest(tmp_path / "s.json", {"a": "nope"})
