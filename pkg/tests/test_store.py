import struct

import numpy as np
import pytest

from vadlab.errors import FormatError, ValidationError
from vadlab.store import (
    DatasetStats,
    Manifest,
    SnippetMatrix,
    VideoRecord,
    balanced_merge,
    dataset_stats,
    load_manifest,
    read_feature_file,
    save_manifest,
    snippet_labels,
    stats_csv,
    write_feature_file,
)


def make_record(
    idx=0,
    category="normal",
    split="train",
    domain="source",
    view=0,
    frame_count=384,
    fps=30,
    ranges=(),
):
    incident = f"{domain}-{category}-{split}-{idx:04d}"
    return VideoRecord(
        id=f"{incident}-v{view}",
        domain=domain,
        category=category,
        view=view,
        incident_id=incident,
        location_id=idx % 75,
        weather="clear",
        time_of_day="day",
        frame_count=frame_count,
        fps=fps,
        abnormal_ranges=tuple(ranges),
        split=split,
        feature_path=f"features/{incident}-v{view}.snpf",
    )


def make_incident(idx=0, category="normal", split="train", domain="source", ranges=()):
    return [
        make_record(idx, category, split, domain, view, ranges=ranges)
        for view in (0, 1)
    ]


def paper_default_manifest():
    """Record set matching the default generation spec for the source domain."""
    videos = []
    spec = [("normal", 113, 18, ()), ("stabbing", 53, 9, ((192, 288),)),
            ("shooting", 64, 9, ((192, 288),))]
    for category, n_train, n_test, ranges in spec:
        for split, count in (("train", n_train), ("test", n_test)):
            for k in range(count):
                videos.extend(make_incident(k, category, split, ranges=ranges))
    return Manifest(d=32, snippet_len=16, videos=videos)


class TestFeatureFileCodec:
    def test_smallest_layout(self, tmp_path):
        path = tmp_path / "a.snpf"
        write_feature_file(SnippetMatrix(np.zeros((1, 2), dtype=np.float32)), path)
        raw = path.read_bytes()
        assert len(raw) == 20 + 8
        assert raw[:4] == b"SNPF"
        version, d, t, snippet_len = struct.unpack("<IIII", raw[4:20])
        assert (version, d, t, snippet_len) == (1, 2, 1, 16)
        assert raw[20:] == b"\x00" * 8

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(171)
        for trial in range(25):
            t = int(rng.integers(1, 33))
            d = int(rng.integers(1, 65))
            values = rng.standard_normal((t, d)).astype(np.float32) * 100
            snippet_len = int(rng.integers(1, 40))
            matrix = SnippetMatrix(values, snippet_len=snippet_len)
            path = tmp_path / f"m{trial}.snpf"
            write_feature_file(matrix, path)
            back = read_feature_file(path)
            assert back.snippet_len == snippet_len
            assert back.values.tobytes() == matrix.values.tobytes()

    def test_non_finite_rejected_at_construction(self):
        values = np.ones((2, 2), dtype=np.float32)
        values[1, 1] = np.nan
        with pytest.raises(ValidationError):
            SnippetMatrix(values)

    def test_non_finite_rejected_at_write(self, tmp_path):
        matrix = SnippetMatrix(np.ones((2, 2), dtype=np.float32))
        matrix.values[0, 0] = np.inf  # mutated after validation
        with pytest.raises(ValidationError):
            write_feature_file(matrix, tmp_path / "bad.snpf")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.snpf"
        write_feature_file(SnippetMatrix(np.zeros((1, 2), dtype=np.float32)), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_feature_file(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.snpf"
        write_feature_file(SnippetMatrix(np.zeros((1, 2), dtype=np.float32)), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            read_feature_file(path)

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        path = tmp_path / "t.snpf"
        write_feature_file(SnippetMatrix(np.ones((3, 4), dtype=np.float32)), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(FormatError) as err:
            read_feature_file(path)
        assert "48" in str(err.value)  # expected payload bytes
        assert "43" in str(err.value)  # actual payload bytes


class TestSnippetLabels:
    def test_default_window(self):
        labels = snippet_labels([(192, 288)], 384, 16)
        assert labels.shape == (24,)
        assert set(np.flatnonzero(labels)) == set(range(12, 19))

    def test_matches_frame_enumeration_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            frame_count = int(rng.integers(1, 400))
            snippet_len = int(rng.integers(1, 33))
            ranges = []
            for _ in range(int(rng.integers(0, 3))):
                s = int(rng.integers(0, frame_count))
                e = int(rng.integers(s, frame_count))
                ranges.append((s, e))
            got = snippet_labels(ranges, frame_count, snippet_len)
            # oracle: mark frames, then any() per whole snippet
            frames = np.zeros(frame_count, dtype=bool)
            for s, e in ranges:
                frames[s : e + 1] = True
            num = frame_count // snippet_len
            expected = [
                int(frames[i * snippet_len : (i + 1) * snippet_len].any())
                for i in range(num)
            ]
            assert got.tolist() == expected

    def test_empty_ranges_all_zero(self):
        assert snippet_labels([], 384, 16).sum() == 0

    def test_full_span_all_ones(self):
        assert snippet_labels([(0, 383)], 384, 16).tolist() == [1] * 24

    def test_out_of_bounds_range(self):
        with pytest.raises(ValidationError):
            snippet_labels([(0, 384)], 384, 16)
        with pytest.raises(ValidationError):
            snippet_labels([(-1, 10)], 384, 16)


class TestDatasetStats:
    def test_default_dataset_counts(self):
        stats = dataset_stats(paper_default_manifest())
        assert stats.overall.videos == 532
        assert stats.overall.total_frames == 204_288
        assert stats.overall.abnormal_frames == 26_190
        assert stats.overall.normal_frames == 178_098
        assert stats.overall.abnormal_minutes == pytest.approx(14.55, abs=1e-9)
        assert stats.train.videos == 460
        assert stats.test.videos == 72
        assert stats.train.abnormal_frames == 22_698
        assert stats.test.abnormal_frames == 3_492
        assert stats.train.normal_frames == 153_942

    def test_single_normal_video(self):
        manifest = Manifest(d=8, snippet_len=16, videos=make_incident(0, "normal"))
        stats = dataset_stats(manifest)
        assert stats.overall.abnormal_frames == 0
        assert stats.overall.normal_frames == 2 * 384

    def test_single_abnormal_video_inclusive_window(self):
        manifest = Manifest(
            d=8, snippet_len=16,
            videos=make_incident(0, "stabbing", ranges=((192, 288),)),
        )
        stats = dataset_stats(manifest)
        assert stats.overall.abnormal_frames == 2 * 97

    def test_reorder_invariance(self):
        manifest = paper_default_manifest()
        shuffled = Manifest(
            d=manifest.d,
            snippet_len=manifest.snippet_len,
            videos=list(reversed(manifest.videos)),
        )
        assert dataset_stats(manifest) == dataset_stats(shuffled)

    def test_labels_sum_matches_abnormal_frames_at_unit_snippets(self):
        # with snippet_len=1 the snippet labels are frame labels
        manifest = paper_default_manifest()
        total = sum(
            snippet_labels(rec.abnormal_ranges, rec.frame_count, 1).sum()
            for rec in manifest.videos
        )
        assert total == dataset_stats(manifest).overall.abnormal_frames

    def test_csv_columns(self):
        text = stats_csv(dataset_stats(paper_default_manifest()))
        lines = text.strip().split("\n")
        assert lines[0] == (
            "split,videos,total_frames,abnormal_frames,normal_frames,"
            "abnormal_minutes,normal_minutes"
        )
        assert len(lines) == 4
        overall = lines[3].split(",")
        assert overall[0] == "overall"
        assert overall[3] == "26190"


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        manifest = Manifest(
            d=8,
            snippet_len=16,
            videos=make_incident(0, "stabbing", ranges=((192, 288),)),
            provenance={"note": "round trip"},
        )
        save_manifest(manifest, tmp_path / "manifest.json")
        back = load_manifest(tmp_path / "manifest.json")
        assert back.d == 8
        assert back.videos == manifest.videos
        assert back.provenance == {"note": "round trip"}
        assert back.root == tmp_path

    def test_category_domain_vocabulary(self):
        with pytest.raises(ValidationError):
            make_record(0, category="stabbing", domain="target", ranges=((1, 2),)).validate()
        with pytest.raises(ValidationError):
            make_record(0, category="fighting", domain="source", ranges=((1, 2),)).validate()

    def test_ranges_required_iff_abnormal(self):
        with pytest.raises(ValidationError):
            make_record(0, category="normal", ranges=((1, 2),)).validate()
        with pytest.raises(ValidationError):
            make_record(0, category="shooting", ranges=()).validate()

    def test_incident_pairing_enforced(self):
        lone = make_record(0)
        manifest = Manifest(d=8, snippet_len=16, videos=[lone])
        with pytest.raises(ValidationError, match="two views"):
            manifest.validate()

    def test_views_must_agree(self):
        a, b = make_incident(0, "shooting", ranges=((192, 288),))
        b = VideoRecord(**{**b.__dict__, "weather": "rain"})
        manifest = Manifest(d=8, snippet_len=16, videos=[a, b])
        with pytest.raises(ValidationError, match="disagree"):
            manifest.validate()


class TestBalancedMerge:
    def test_equal_sizes_keep_everything(self):
        a = list(range(460))
        b = list(range(1000, 1460))
        merged = balanced_merge(a, b, seed=0)
        assert len(merged) == 920
        assert merged == a + b

    def test_larger_set_subsampled(self):
        a = list(range(500))
        b = list(range(1000, 1460))
        merged = balanced_merge(a, b, seed=0)
        assert len(merged) == 920
        picked_a = [x for x in merged if x < 500]
        assert len(picked_a) == 460
        assert len(set(picked_a)) == 460  # without replacement
        assert merged[460:] == b

    def test_deterministic_per_seed(self):
        a = list(range(100))
        b = list(range(1000, 1030))
        assert balanced_merge(a, b, 7) == balanced_merge(a, b, 7)
        assert balanced_merge(a, b, 7) != balanced_merge(a, b, 8)

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValidationError):
            balanced_merge([], [1], seed=0)
        with pytest.raises(ValidationError):
            balanced_merge([1], [], seed=0)
