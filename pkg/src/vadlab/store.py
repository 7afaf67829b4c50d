"""On-disk data model: feature files, manifests, labels, statistics, merging.

A dataset is a manifest (JSON) plus one binary feature file per video.
Feature files hold a float32 matrix of per-snippet feature vectors, laid out
as:

    magic "SNPF" | version u32 LE | d u32 LE | T u32 LE | snippet_len u32 LE
    followed by T*d float32 LE values, row-major.

Manifests carry per-video metadata (domain, category, view, split, abnormal
frame ranges) and index the feature files by path relative to the manifest's
directory.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError

FEATURE_MAGIC = b"SNPF"
FEATURE_VERSION = 1
HEADER_SIZE = 20
DEFAULT_SNIPPET_LEN = 16

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

NORMAL = "normal"
SHOOTING = "shooting"
STABBING = "stabbing"
FIGHTING = "fighting"

# Per-domain category vocabulary: stabbing incidents exist only in the source
# domain, fighting incidents only in the target domain.
DOMAIN_CATEGORIES = {
    SOURCE: (NORMAL, SHOOTING, STABBING),
    TARGET: (NORMAL, SHOOTING, FIGHTING),
}

TRAIN = "train"
TEST = "test"
SPLITS = (TRAIN, TEST)

WEATHERS = ("clear", "overcast", "rain", "fog")
TIMES_OF_DAY = ("dawn", "day", "dusk", "night")
NUM_LOCATIONS = 75


@dataclass(frozen=True)
class SnippetMatrix:
    """T x d block of per-snippet feature vectors (stored as float32).

    Each row summarizes `snippet_len` consecutive frames. All values must be
    finite; T and d must both be at least 1.
    """

    values: np.ndarray
    snippet_len: int = DEFAULT_SNIPPET_LEN

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(
                f"expected a T x d matrix with T, d >= 1, got shape {values.shape}"
            )
        if int(self.snippet_len) < 1:
            raise ValidationError(f"snippet_len must be >= 1, got {self.snippet_len}")
        if not np.isfinite(values).all():
            raise ValidationError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "snippet_len", int(self.snippet_len))

    @property
    def num_snippets(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def write_feature_file(matrix: SnippetMatrix, path: str | Path) -> None:
    """Write `matrix` to `path` in the binary snippet-feature layout."""
    values = matrix.values
    if not np.isfinite(values).all():
        raise ValidationError("feature matrix contains non-finite values")
    header = FEATURE_MAGIC + struct.pack(
        "<IIII", FEATURE_VERSION, matrix.dim, matrix.num_snippets, matrix.snippet_len
    )
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_feature_file(path: str | Path) -> SnippetMatrix:
    """Read a snippet-feature file written by `write_feature_file`."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(
            f"{path}: file too short for header (expected {HEADER_SIZE} bytes, got {len(raw)})"
        )
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    version, d, t, snippet_len = struct.unpack("<IIII", raw[4:HEADER_SIZE])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = t * d * 4
    actual = len(raw) - HEADER_SIZE
    if actual != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {actual}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(t, d)
    return SnippetMatrix(values=values.copy(), snippet_len=snippet_len)


def validate_ranges(ranges: Iterable[Sequence[int]], frame_count: int) -> None:
    for r in ranges:
        start, end = int(r[0]), int(r[1])
        if not (0 <= start <= end < frame_count):
            raise ValidationError(
                f"frame range [{start}, {end}] out of bounds for {frame_count} frames"
            )


def snippet_labels(
    ranges: Iterable[Sequence[int]], frame_count: int, snippet_len: int
) -> np.ndarray:
    """Binary label per snippet: 1 iff the snippet's frame span intersects a range.

    Snippet i spans frames [i*snippet_len, (i+1)*snippet_len - 1]; ranges are
    inclusive frame intervals. Returns an int array of length
    floor(frame_count / snippet_len).
    """
    if snippet_len < 1:
        raise ValidationError(f"snippet_len must be >= 1, got {snippet_len}")
    ranges = [(int(r[0]), int(r[1])) for r in ranges]
    validate_ranges(ranges, frame_count)
    num = frame_count // snippet_len
    labels = np.zeros(num, dtype=np.int64)
    for start, end in ranges:
        # snippet i intersects [start, end] iff i*len <= end and i*len + len - 1 >= start
        first = max(0, math.ceil((start - snippet_len + 1) / snippet_len))
        last = min(num - 1, end // snippet_len)
        if first <= last:
            labels[first : last + 1] = 1
    return labels


@dataclass(frozen=True)
class VideoRecord:
    """Metadata for one video (one camera view of one incident)."""

    id: str
    domain: str
    category: str
    view: int
    incident_id: str
    location_id: int
    weather: str
    time_of_day: str
    frame_count: int
    fps: int
    abnormal_ranges: tuple[tuple[int, int], ...]
    split: str
    feature_path: str

    def __post_init__(self):
        object.__setattr__(
            self,
            "abnormal_ranges",
            tuple((int(s), int(e)) for s, e in self.abnormal_ranges),
        )

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ValidationError(f"{self.id}: unknown domain {self.domain!r}")
        if self.category not in DOMAIN_CATEGORIES[self.domain]:
            raise ValidationError(
                f"{self.id}: category {self.category!r} not allowed in domain {self.domain!r}"
            )
        if self.view not in (0, 1):
            raise ValidationError(f"{self.id}: view must be 0 or 1, got {self.view}")
        if not (0 <= self.location_id < NUM_LOCATIONS):
            raise ValidationError(
                f"{self.id}: location_id {self.location_id} outside [0, {NUM_LOCATIONS})"
            )
        if self.weather not in WEATHERS:
            raise ValidationError(f"{self.id}: unknown weather tag {self.weather!r}")
        if self.time_of_day not in TIMES_OF_DAY:
            raise ValidationError(f"{self.id}: unknown time tag {self.time_of_day!r}")
        if self.frame_count < 1 or self.fps < 1:
            raise ValidationError(f"{self.id}: frame_count and fps must be >= 1")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.id}: unknown split {self.split!r}")
        validate_ranges(self.abnormal_ranges, self.frame_count)
        if (self.category == NORMAL) != (len(self.abnormal_ranges) == 0):
            raise ValidationError(
                f"{self.id}: abnormal_ranges must be empty exactly for normal videos"
            )

    def abnormal_frame_count(self) -> int:
        return sum(e - s + 1 for s, e in self.abnormal_ranges)


# Fields that may differ between the two views of one incident.
_PER_VIEW_FIELDS = ("id", "view", "feature_path")


@dataclass
class Manifest:
    """Index of one dataset: dataset-wide constants plus per-video records."""

    d: int
    snippet_len: int
    videos: list[VideoRecord]
    root: Path | None = None
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.d < 1:
            raise ValidationError(f"feature dimension must be >= 1, got {self.d}")
        if self.snippet_len < 1:
            raise ValidationError(f"snippet_len must be >= 1, got {self.snippet_len}")
        seen_ids = set()
        for rec in self.videos:
            rec.validate()
            if rec.id in seen_ids:
                raise ValidationError(f"duplicate video id {rec.id!r}")
            seen_ids.add(rec.id)
        for incident_id, group in self.incidents().items():
            if len(group) != 2 or {r.view for r in group} != {0, 1}:
                raise ValidationError(
                    f"incident {incident_id!r} must have exactly two views, got "
                    f"{[r.id for r in group]}"
                )
            a, b = group
            for f in VideoRecord.__dataclass_fields__:
                if f in _PER_VIEW_FIELDS:
                    continue
                if getattr(a, f) != getattr(b, f):
                    raise ValidationError(
                        f"incident {incident_id!r}: views disagree on {f!r}"
                    )

    def records(
        self,
        split: str | None = None,
        domain: str | None = None,
        category: str | None = None,
        view: int | None = None,
    ) -> list[VideoRecord]:
        out = []
        for rec in self.videos:
            if split is not None and rec.split != split:
                continue
            if domain is not None and rec.domain != domain:
                continue
            if category is not None and rec.category != category:
                continue
            if view is not None and rec.view != view:
                continue
            out.append(rec)
        return out

    def incidents(
        self, records: Sequence[VideoRecord] | None = None
    ) -> dict[str, list[VideoRecord]]:
        groups: dict[str, list[VideoRecord]] = {}
        for rec in self.videos if records is None else records:
            groups.setdefault(rec.incident_id, []).append(rec)
        return groups

    def resolve_path(self, record: VideoRecord) -> Path:
        if self.root is None:
            raise ValidationError(
                "manifest has no root directory; load it from disk or set root"
            )
        return Path(self.root) / record.feature_path

    def categories(self, split: str | None = None) -> list[str]:
        cats = {rec.category for rec in self.records(split=split)}
        return sorted(cats)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "d": manifest.d,
        "snippet_len": manifest.snippet_len,
        "provenance": manifest.provenance,
        "videos": [
            {**asdict(rec), "abnormal_ranges": [list(r) for r in rec.abnormal_ranges]}
            for rec in manifest.videos
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


_RECORD_FIELDS = set(VideoRecord.__dataclass_fields__)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse manifest: {exc}") from exc
    for key in ("d", "snippet_len", "videos"):
        if key not in doc:
            raise FormatError(f"{path}: manifest missing key {key!r}")
    videos = []
    for entry in doc["videos"]:
        unknown = set(entry) - _RECORD_FIELDS
        if unknown:
            raise FormatError(f"{path}: unknown record keys {sorted(unknown)}")
        missing = _RECORD_FIELDS - set(entry)
        if missing:
            raise FormatError(f"{path}: record missing keys {sorted(missing)}")
        entry = dict(entry)
        entry["abnormal_ranges"] = tuple(tuple(r) for r in entry["abnormal_ranges"])
        videos.append(VideoRecord(**entry))
    manifest = Manifest(
        d=int(doc["d"]),
        snippet_len=int(doc["snippet_len"]),
        videos=videos,
        root=path.parent,
        provenance=doc.get("provenance", {}),
    )
    manifest.validate()
    return manifest


@dataclass(frozen=True)
class SplitStats:
    videos: int
    total_frames: int
    abnormal_frames: int
    normal_frames: int
    abnormal_minutes: float
    normal_minutes: float


@dataclass(frozen=True)
class DatasetStats:
    train: SplitStats
    test: SplitStats
    overall: SplitStats

    def rows(self) -> list[tuple[str, SplitStats]]:
        return [("train", self.train), ("test", self.test), ("overall", self.overall)]


def _split_stats(records: Sequence[VideoRecord]) -> SplitStats:
    total = abnormal = 0
    # integer frame tallies per fps so minutes come out identical for any
    # record ordering
    per_fps: dict[int, list[int]] = {}
    for rec in records:
        abn = rec.abnormal_frame_count()
        total += rec.frame_count
        abnormal += abn
        bucket = per_fps.setdefault(rec.fps, [0, 0])
        bucket[0] += abn
        bucket[1] += rec.frame_count - abn
    abn_minutes = sum(per_fps[fps][0] / (fps * 60) for fps in sorted(per_fps))
    nrm_minutes = sum(per_fps[fps][1] / (fps * 60) for fps in sorted(per_fps))
    return SplitStats(
        videos=len(records),
        total_frames=total,
        abnormal_frames=abnormal,
        normal_frames=total - abnormal,
        abnormal_minutes=abn_minutes,
        normal_minutes=nrm_minutes,
    )


def dataset_stats(manifest: Manifest) -> DatasetStats:
    """Frame and duration statistics per split and overall.

    Abnormal frame counts use inclusive interval lengths (end - start + 1);
    minutes are frames / (fps * 60) accumulated per record.
    """
    manifest.validate()
    return DatasetStats(
        train=_split_stats(manifest.records(split=TRAIN)),
        test=_split_stats(manifest.records(split=TEST)),
        overall=_split_stats(manifest.videos),
    )


STATS_COLUMNS = (
    "split",
    "videos",
    "total_frames",
    "abnormal_frames",
    "normal_frames",
    "abnormal_minutes",
    "normal_minutes",
)


def stats_csv(stats: DatasetStats) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STATS_COLUMNS)
    for name, s in stats.rows():
        writer.writerow(
            [
                name,
                s.videos,
                s.total_frames,
                s.abnormal_frames,
                s.normal_frames,
                s.abnormal_minutes,
                s.normal_minutes,
            ]
        )
    return buf.getvalue()


def balanced_merge(set_a: Sequence, set_b: Sequence, seed) -> list:
    """Union of the two sets with the larger one subsampled to the smaller's size.

    Subsampling is uniform without replacement, deterministic per seed. The
    result has 2 * min(|A|, |B|) items, A-part first, in stable order.
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValidationError("balanced_merge requires two non-empty sets")
    from .seeding import child_rng

    n = min(len(set_a), len(set_b))
    rng = child_rng(seed)

    def pick(items: Sequence) -> list:
        if len(items) == n:
            return list(items)
        idx = np.sort(rng.choice(len(items), size=n, replace=False))
        return [items[i] for i in idx]

    return pick(set_a) + pick(set_b)


@dataclass(frozen=True)
class LoadedVideo:
    """A video record together with its feature matrix."""

    record: VideoRecord
    features: SnippetMatrix


class FeatureCache:
    """Read-through cache for feature files that records every path accessed."""

    def __init__(self):
        self._cache: dict[str, SnippetMatrix] = {}
        self.paths_read: set[str] = set()

    def load(self, manifest: Manifest, record: VideoRecord) -> SnippetMatrix:
        path = str(manifest.resolve_path(record))
        self.paths_read.add(path)
        if path not in self._cache:
            matrix = read_feature_file(path)
            if matrix.dim != manifest.d:
                raise ValidationError(
                    f"{path}: feature dimension {matrix.dim} != manifest d {manifest.d}"
                )
            self._cache[path] = matrix
        return self._cache[path]


def load_videos(
    manifest: Manifest, split: str | None = None, cache: FeatureCache | None = None
) -> list[LoadedVideo]:
    cache = cache if cache is not None else FeatureCache()
    return [
        LoadedVideo(record=rec, features=cache.load(manifest, rec))
        for rec in manifest.records(split=split)
    ]


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
