"""Procedural generator for two-domain labeled snippet-feature datasets.

Pipeline per incident: sample a scene configuration (event category, timing,
weather, time of day), assign one of 75 fixed locations with its region-of-
interest and per-camera signatures, then synthesize the two views' snippet
features. Source-domain videos additionally pass their noiseless means
through a known invertible affine shift (uniform scale times a random
rotation, plus a translation), which provides an exact alignment oracle for
the adaptation stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError, VadlabError
from .seeding import child_rng
from .store import (
    DEFAULT_SNIPPET_LEN,
    DOMAIN_CATEGORIES,
    DOMAINS,
    FIGHTING,
    NORMAL,
    NUM_LOCATIONS,
    SHOOTING,
    SOURCE,
    SPLITS,
    STABBING,
    TARGET,
    TIMES_OF_DAY,
    WEATHERS,
    Manifest,
    SnippetMatrix,
    VideoRecord,
    snippet_labels,
    save_manifest,
    write_feature_file,
)

# Stream codes under the dataset seed.
_WORLD_STREAM = 11
_VIDEO_STREAM = 12

_DOMAIN_CODES = {SOURCE: 0, TARGET: 1}
_CATEGORY_CODES = {NORMAL: 0, SHOOTING: 1, STABBING: 2, FIGHTING: 3}
_SPLIT_CODES = {"train": 0, "test": 1}

# Source stabbing and target fighting depict the same underlying incident
# kind (close-quarters assault), so they share one event prototype.
_EVENT_KIND = {NORMAL: "normal", SHOOTING: "shooting", STABBING: "melee", FIGHTING: "melee"}
_ABNORMAL_KINDS = ("shooting", "melee")


@dataclass(frozen=True)
class SceneConfig:
    """Per-incident scenario parameters shared by both camera views."""

    category: str
    frame_count: int = 384
    fps: int = 30
    abnormal_window: tuple[int, int] = (192, 288)
    weather: str = "clear"
    time_of_day: str = "day"

    def __post_init__(self):
        if self.category not in _CATEGORY_CODES:
            raise ValidationError(f"unknown category {self.category!r}")
        start, end = self.abnormal_window
        if self.category != NORMAL and not (0 <= start <= end < self.frame_count):
            raise ValidationError(
                f"abnormal window {self.abnormal_window} outside [0, {self.frame_count})"
            )
        if self.weather not in WEATHERS:
            raise ValidationError(f"unknown weather {self.weather!r}")
        if self.time_of_day not in TIMES_OF_DAY:
            raise ValidationError(f"unknown time of day {self.time_of_day!r}")

    def effective_ranges(self) -> tuple[tuple[int, int], ...]:
        if self.category == NORMAL:
            return ()
        return (tuple(int(v) for v in self.abnormal_window),)


@dataclass(frozen=True)
class LocationAssignment:
    """One of the fixed scene locations: ROI signature plus two camera signatures."""

    location_id: int
    roi_offset: np.ndarray
    view_offsets: np.ndarray  # (2, d)


@dataclass(frozen=True)
class ShiftSpec:
    """Invertible affine domain shift x -> scale * rotation @ x + translation."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    noise_sigma: float

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.scale * self.rotation

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.scale * (x @ self.rotation.T) + self.translation

    def invert(self, x: np.ndarray) -> np.ndarray:
        # Exact inverse: rotation is orthogonal, so M^-1 = R^T / scale.
        x = np.asarray(x, dtype=np.float64)
        return ((x - self.translation) @ self.rotation) / self.scale


def save_shift(shift: ShiftSpec, path: str | Path) -> None:
    doc = {
        "scale": shift.scale,
        "noise_sigma": shift.noise_sigma,
        "translation": shift.translation.tolist(),
        "rotation": shift.rotation.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_shift(path: str | Path) -> ShiftSpec:
    doc = json.loads(Path(path).read_text())
    return ShiftSpec(
        rotation=np.asarray(doc["rotation"], dtype=np.float64),
        scale=float(doc["scale"]),
        translation=np.asarray(doc["translation"], dtype=np.float64),
        noise_sigma=float(doc["noise_sigma"]),
    )


@dataclass(frozen=True)
class ClassCounts:
    train: int
    test: int


def default_counts() -> dict[str, dict[str, ClassCounts]]:
    return {
        SOURCE: {
            NORMAL: ClassCounts(226, 36),
            STABBING: ClassCounts(106, 18),
            SHOOTING: ClassCounts(128, 18),
        },
        TARGET: {
            FIGHTING: ClassCounts(45, 5),
            SHOOTING: ClassCounts(27, 23),
            NORMAL: ClassCounts(72, 28),
        },
    }


@dataclass(frozen=True)
class GenerationSpec:
    """Everything one dataset generation run depends on.

    Per-class counts are video counts; videos come in two-view incidents, so
    odd counts round up to the next whole incident pair.
    """

    d: int = 32
    seed: int = 0
    frame_count: int = 384
    fps: int = 30
    snippet_len: int = DEFAULT_SNIPPET_LEN
    abnormal_window: tuple[int, int] = (192, 288)
    counts: dict[str, dict[str, ClassCounts]] = field(default_factory=default_counts)
    prototype_scale: float = 1.0
    roi_scale: float = 0.4
    view_scale: float = 0.25
    condition_scale: float = 0.05
    noise_sigma: float = 2.0
    shift_scale: float = 1.5
    shift_rotation_angle: float = 0.5
    shift_translation_scale: float = 1.0
    num_locations: int = NUM_LOCATIONS

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError(f"d must be >= 1, got {self.d}")
        if self.frame_count < self.snippet_len or self.snippet_len < 1:
            raise ValidationError("frame_count must cover at least one snippet")
        if self.fps < 1:
            raise ValidationError(f"fps must be >= 1, got {self.fps}")
        start, end = self.abnormal_window
        if not (0 <= start <= end < self.frame_count):
            raise ValidationError(
                f"abnormal window {self.abnormal_window} outside [0, {self.frame_count})"
            )
        if not (1 <= self.num_locations <= NUM_LOCATIONS):
            raise ValidationError(
                f"num_locations must be in [1, {NUM_LOCATIONS}], got {self.num_locations}"
            )
        for domain, per_class in self.counts.items():
            if domain not in DOMAINS:
                raise ValidationError(f"unknown domain {domain!r} in counts")
            for category, cc in per_class.items():
                if category not in DOMAIN_CATEGORIES[domain]:
                    raise ValidationError(
                        f"category {category!r} not allowed in domain {domain!r}"
                    )
                if cc.train < 0 or cc.test < 0:
                    raise ValidationError(f"negative count for {domain}/{category}")
        for name in ("prototype_scale", "roi_scale", "view_scale", "condition_scale",
                     "noise_sigma", "shift_rotation_angle", "shift_translation_scale"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.shift_scale <= 0:
            raise ValidationError("shift_scale must be > 0")


@dataclass
class World:
    """Per-dataset tables: event prototypes, locations, condition offsets, shift."""

    spec: GenerationSpec
    prototypes: dict[str, np.ndarray]
    locations: list[LocationAssignment]
    weather_offsets: dict[str, np.ndarray]
    time_offsets: dict[str, np.ndarray]
    shift: ShiftSpec


def _random_rotation(d: int, rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Random rotation as a product of 2d seeded Givens rotations.

    Each Givens rotation acts on a random coordinate pair with an angle
    uniform in [-max_angle, max_angle]; the angle bound controls how far the
    rotation strays from the identity while keeping it exactly orthogonal.
    """
    rot = np.eye(d)
    if d == 1:
        return rot
    for _ in range(2 * d):
        i, j = rng.choice(d, size=2, replace=False)
        theta = rng.uniform(-max_angle, max_angle)
        c, s = math.cos(theta), math.sin(theta)
        rows = rot[[i, j], :].copy()
        rot[i, :] = c * rows[0] - s * rows[1]
        rot[j, :] = s * rows[0] + c * rows[1]
    return rot


def build_world(spec: GenerationSpec) -> World:
    rng = child_rng(spec.seed, _WORLD_STREAM)
    d = spec.d
    prototypes = {"normal": rng.standard_normal(d) * spec.prototype_scale}
    for kind in _ABNORMAL_KINDS:
        prototypes[kind] = rng.standard_normal(d) * spec.prototype_scale
    locations = []
    for loc in range(spec.num_locations):
        roi = rng.standard_normal(d) * spec.roi_scale
        views = rng.standard_normal((2, d)) * spec.view_scale
        locations.append(
            LocationAssignment(location_id=loc, roi_offset=roi, view_offsets=views)
        )
    if spec.roi_scale > 0:
        signatures = {loc.roi_offset.tobytes() for loc in locations}
        if len(signatures) != spec.num_locations:
            raise VadlabError("location ROI signatures collided; check the RNG stream")
    weather_offsets = {w: rng.standard_normal(d) * spec.condition_scale for w in WEATHERS}
    time_offsets = {t: rng.standard_normal(d) * spec.condition_scale for t in TIMES_OF_DAY}
    shift = ShiftSpec(
        rotation=_random_rotation(d, rng, spec.shift_rotation_angle),
        scale=spec.shift_scale,
        translation=rng.uniform(-1.0, 1.0, size=d) * spec.shift_translation_scale,
        noise_sigma=spec.noise_sigma,
    )
    return World(
        spec=spec,
        prototypes=prototypes,
        locations=locations,
        weather_offsets=weather_offsets,
        time_offsets=time_offsets,
        shift=shift,
    )


def sample_config(
    spec: GenerationSpec, domain: str, category: str, rng: np.random.Generator
) -> SceneConfig:
    """Draw weather and time of day; timing and length come from the spec."""
    if domain not in DOMAINS:
        raise ValidationError(f"unknown domain {domain!r}")
    if category not in DOMAIN_CATEGORIES[domain]:
        raise ValidationError(
            f"category {category!r} not allowed in domain {domain!r}"
        )
    weather = WEATHERS[int(rng.integers(len(WEATHERS)))]
    time_of_day = TIMES_OF_DAY[int(rng.integers(len(TIMES_OF_DAY)))]
    return SceneConfig(
        category=category,
        frame_count=spec.frame_count,
        fps=spec.fps,
        abnormal_window=spec.abnormal_window,
        weather=weather,
        time_of_day=time_of_day,
    )


def assign_location(world: World, rng: np.random.Generator) -> LocationAssignment:
    """Uniform choice from the dataset's fixed location table."""
    return world.locations[int(rng.integers(len(world.locations)))]


def generate_video(
    world: World,
    domain: str,
    config: SceneConfig,
    assignment: LocationAssignment,
    incident_id: str,
    split: str,
    shift: ShiftSpec | None,
    rng: np.random.Generator,
) -> list[tuple[VideoRecord, SnippetMatrix]]:
    """Synthesize both views of one incident.

    Snippet t's feature is the event prototype for its state (abnormal iff
    the snippet overlaps the abnormal window) plus ROI, condition, and view
    signatures; when a shift is given the noiseless mean is passed through it
    before per-snippet noise is added. Both views share configuration,
    timing, and labels; their noise draws are independent.
    """
    spec = world.spec
    d = spec.d
    if assignment.roi_offset.shape[0] != d:
        raise ValidationError(
            f"location signature dimension {assignment.roi_offset.shape[0]} != d {d}"
        )
    if shift is not None and shift.dim != d:
        raise ValidationError(f"shift dimension {shift.dim} != d {d}")
    labels = snippet_labels(config.effective_ranges(), config.frame_count, spec.snippet_len)
    kind = _EVENT_KIND[config.category]
    base = np.tile(world.prototypes["normal"], (len(labels), 1))
    if config.category != NORMAL:
        base[labels == 1] = world.prototypes[kind]
    base = (
        base
        + assignment.roi_offset
        + world.weather_offsets[config.weather]
        + world.time_offsets[config.time_of_day]
    )
    out = []
    for view in (0, 1):
        mean = base + assignment.view_offsets[view]
        if shift is not None:
            mean = shift.apply(mean)
        values = mean + spec.noise_sigma * rng.standard_normal((len(labels), d))
        matrix = SnippetMatrix(values=values.astype(np.float32), snippet_len=spec.snippet_len)
        video_id = f"{incident_id}-v{view}"
        record = VideoRecord(
            id=video_id,
            domain=domain,
            category=config.category,
            view=view,
            incident_id=incident_id,
            location_id=assignment.location_id,
            weather=config.weather,
            time_of_day=config.time_of_day,
            frame_count=config.frame_count,
            fps=config.fps,
            abnormal_ranges=config.effective_ranges(),
            split=split,
            feature_path=f"features/{video_id}.snpf",
        )
        out.append((record, matrix))
    return out


def generation_spec_to_dict(spec: GenerationSpec) -> dict:
    return {
        "d": spec.d,
        "seed": spec.seed,
        "frame_count": spec.frame_count,
        "fps": spec.fps,
        "snippet_len": spec.snippet_len,
        "abnormal_window": list(spec.abnormal_window),
        "counts": {
            domain: {cat: [cc.train, cc.test] for cat, cc in per_class.items()}
            for domain, per_class in spec.counts.items()
        },
        "prototype_scale": spec.prototype_scale,
        "roi_scale": spec.roi_scale,
        "view_scale": spec.view_scale,
        "condition_scale": spec.condition_scale,
        "noise_sigma": spec.noise_sigma,
        "shift_scale": spec.shift_scale,
        "shift_rotation_angle": spec.shift_rotation_angle,
        "shift_translation_scale": spec.shift_translation_scale,
        "num_locations": spec.num_locations,
    }


def generate_dataset(
    spec: GenerationSpec, out_dir: str | Path
) -> tuple[Manifest, Manifest, ShiftSpec]:
    """Generate both domains under `out_dir` and persist the shift record.

    Layout: <out>/source/manifest.json plus feature files, the same for
    target, and <out>/shift.json. Every incident draws its own child RNG
    stream, so outputs are byte-identical for equal specs.
    """
    world = build_world(spec)
    out = Path(out_dir)
    manifests: dict[str, Manifest] = {}
    for domain in DOMAINS:
        domain_dir = out / domain
        (domain_dir / "features").mkdir(parents=True, exist_ok=True)
        records = []
        per_class = spec.counts.get(domain, {})
        for category in DOMAIN_CATEGORIES[domain]:
            if category not in per_class:
                continue
            cc = per_class[category]
            for split, count in (("train", cc.train), ("test", cc.test)):
                for k in range(math.ceil(count / 2)):
                    rng = child_rng(
                        spec.seed,
                        _VIDEO_STREAM,
                        _DOMAIN_CODES[domain],
                        _CATEGORY_CODES[category],
                        _SPLIT_CODES[split],
                        k,
                    )
                    config = sample_config(spec, domain, category, rng)
                    assignment = assign_location(world, rng)
                    incident_id = f"{domain}-{category}-{split}-{k:04d}"
                    pair = generate_video(
                        world,
                        domain,
                        config,
                        assignment,
                        incident_id,
                        split,
                        world.shift if domain == SOURCE else None,
                        rng,
                    )
                    for record, matrix in pair:
                        write_feature_file(matrix, domain_dir / record.feature_path)
                        records.append(record)
        manifest = Manifest(
            d=spec.d,
            snippet_len=spec.snippet_len,
            videos=records,
            root=domain_dir,
            provenance={"domain": domain, "generator": generation_spec_to_dict(spec)},
        )
        manifest.validate()
        save_manifest(manifest, domain_dir / "manifest.json")
        manifests[domain] = manifest
    save_shift(world.shift, out / "shift.json")
    return manifests[SOURCE], manifests[TARGET], world.shift


def oracle_align(matrix: SnippetMatrix, shift: ShiftSpec) -> SnippetMatrix:
    """Apply the exact shift inverse row-wise: x -> M^-1 (x - b)."""
    if matrix.dim != shift.dim:
        raise ValidationError(
            f"matrix dimension {matrix.dim} != shift dimension {shift.dim}"
        )
    aligned = shift.invert(matrix.values.astype(np.float64))
    return SnippetMatrix(values=aligned.astype(np.float32), snippet_len=matrix.snippet_len)


def oracle_align_dataset(
    manifest: Manifest, shift: ShiftSpec, out_dir: str | Path
) -> Manifest:
    """Rewrite a manifest's TRAIN features through the exact shift inverse."""
    from .store import read_feature_file

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    records = manifest.records(split="train")
    if not records:
        raise ValidationError("manifest has no train records to align")
    for rec in records:
        matrix = read_feature_file(manifest.resolve_path(rec))
        write_feature_file(oracle_align(matrix, shift), out / rec.feature_path)
    aligned = Manifest(
        d=manifest.d,
        snippet_len=manifest.snippet_len,
        videos=list(records),
        root=out,
        provenance={"kind": "oracle_aligned", "base": manifest.provenance},
    )
    aligned.validate()
    save_manifest(aligned, out / "manifest.json")
    return aligned
