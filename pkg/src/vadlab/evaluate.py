"""Frame-level ROC-AUC evaluation and the three-setting experiment matrix.

AUC is the exact rank statistic: tied scores give half credit per
positive/negative pair. Evaluation broadcasts snippet scores to their frames,
fuses the two camera views of each incident (elementwise max by default),
and reports overall, per-category, and per-view numbers. The experiment
matrix trains detectors on target-only, target plus raw source, and target
plus adapted source data (optionally plus an oracle-aligned arm) over several
seeds and evaluates every arm on the target test split only.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapt import DEFAULT_CLASS_MAP, AdaptationHyper, adapt_dataset
from .detector import Detector, DetectorHyper, score_video, train_detector
from .errors import UndefinedMetricError, ValidationError
from .scenegen import ShiftSpec, oracle_align_dataset
from .seeding import seed_list
from .store import (
    NORMAL,
    FeatureCache,
    LoadedVideo,
    Manifest,
    VideoRecord,
    balanced_merge,
    load_videos,
)

FUSION_MAX = "max"
FUSION_MEAN = "mean"

_DETECTOR_STREAM = 61
_MERGE_STREAM = 62
_ADAPT_STREAM = 63

SETTING_TARGET_ONLY = "target_only"
SETTING_WITH_RAW_SOURCE = "with_raw_source"
SETTING_WITH_ADAPTED_SOURCE = "with_adapted_source"
SETTING_WITH_ORACLE_SOURCE = "with_oracle_source"


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact tie-aware ROC-AUC via midranks.

    Equals (#pairs with positive score > negative score + half the tied
    pairs) / (#positives * #negatives). Requires both classes present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValidationError(
            f"scores and labels must be equal-length 1-D sequences, got "
            f"{scores.shape} and {labels.shape}"
        )
    positive = labels == 1
    num_pos = int(np.count_nonzero(positive))
    num_neg = scores.shape[0] - num_pos
    if num_pos == 0 or num_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {num_pos} positive and {num_neg} negative labels"
        )
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    n = scores.shape[0]
    group_start = np.r_[True, sorted_scores[1:] != sorted_scores[:-1]]
    group_id = np.cumsum(group_start) - 1
    starts = np.flatnonzero(group_start)
    counts = np.diff(np.r_[starts, n])
    midranks = starts + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(n)
    ranks[order] = midranks[group_id]
    # Ranks are exact half-integers, so the pair count below is exact; a
    # single correctly-rounded division keeps equality with a pairwise count.
    u_twice = int(round(2.0 * float(np.sum(ranks[positive])))) - num_pos * (num_pos + 1)
    return u_twice / (2 * num_pos * num_neg)


def frame_labels(record: VideoRecord, snippet_len: int) -> np.ndarray:
    """Per-frame binary labels over the frames covered by whole snippets."""
    covered = (record.frame_count // snippet_len) * snippet_len
    labels = np.zeros(covered, dtype=np.int64)
    for start, end in record.abnormal_ranges:
        if start < covered:
            labels[start : min(end + 1, covered)] = 1
    return labels


def frame_scores(snippet_scores: np.ndarray, snippet_len: int) -> np.ndarray:
    """Each snippet score repeated snippet_len times."""
    return np.repeat(np.asarray(snippet_scores, dtype=np.float64), snippet_len)


@dataclass(frozen=True)
class AucReport:
    """AUC numbers for one evaluation, or seed-averaged across several."""

    overall: float
    per_category: dict[str, float]
    per_view: dict[int, float]
    single_view: float
    seeds: tuple[int, ...] = ()
    per_seed: tuple["AucReport", ...] = ()

    def per_seed_overall(self) -> tuple[float, ...]:
        return tuple(r.overall for r in self.per_seed) or (self.overall,)


@dataclass
class _ScoredVideo:
    record: VideoRecord
    frames: np.ndarray
    labels: np.ndarray


def _score_manifest(
    detector: Detector,
    manifest: Manifest,
    split: str,
    cache: FeatureCache,
) -> list[_ScoredVideo]:
    records = manifest.records(split=split)
    if not records:
        raise ValidationError(f"no {split!r} records to evaluate")
    scored = []
    for rec in records:
        matrix = cache.load(manifest, rec)
        snips = score_video(detector, matrix)
        scored.append(
            _ScoredVideo(
                record=rec,
                frames=frame_scores(snips, manifest.snippet_len),
                labels=frame_labels(rec, manifest.snippet_len),
            )
        )
    return scored


def _fused_pools(
    scored: list[_ScoredVideo], fusion: str, concat_views: bool
) -> tuple[np.ndarray, np.ndarray]:
    if concat_views:
        return (
            np.concatenate([s.frames for s in scored]),
            np.concatenate([s.labels for s in scored]),
        )
    groups: dict[str, list[_ScoredVideo]] = {}
    for s in scored:
        groups.setdefault(s.record.incident_id, []).append(s)
    frames, labels = [], []
    for incident_id, group in groups.items():
        if len(group) != 2 or {g.record.view for g in group} != {0, 1}:
            raise ValidationError(
                f"incident {incident_id!r} is missing a view pair; "
                "fusion needs both views"
            )
        stacked = np.vstack([g.frames for g in group])
        fused = stacked.max(axis=0) if fusion == FUSION_MAX else stacked.mean(axis=0)
        frames.append(fused)
        labels.append(group[0].labels)
    return np.concatenate(frames), np.concatenate(labels)


def evaluate_detector(
    detector: Detector,
    manifest: Manifest,
    split: str = "test",
    fusion: str = FUSION_MAX,
    concat_views: bool = False,
    category: str | None = None,
    view: int | None = None,
    cache: FeatureCache | None = None,
) -> AucReport:
    """Frame-level AUC report on one manifest split.

    Overall fuses the two views of each incident before pooling frames across
    videos; the single-view number is the mean of the two per-view AUCs;
    per-category AUCs keep all normal test videos and restrict abnormal ones
    to that category. `category`/`view` restrict the report to one slice.
    """
    if fusion not in (FUSION_MAX, FUSION_MEAN):
        raise ValidationError(f"unknown fusion rule {fusion!r}")
    if view is not None and view not in (0, 1):
        raise ValidationError(f"view filter must be 0 or 1, got {view}")
    cache = cache if cache is not None else FeatureCache()
    scored = _score_manifest(detector, manifest, split, cache)

    present = sorted({s.record.category for s in scored if s.record.category != NORMAL})
    if category is not None:
        if category not in present:
            raise ValidationError(
                f"no abnormal {split!r} videos of category {category!r}"
            )
        present = [category]

    def pool_auc(videos: list[_ScoredVideo]) -> float:
        frames, labels = _fused_pools(videos, fusion, concat_views)
        return roc_auc(frames, labels)

    normals = [s for s in scored if s.record.category == NORMAL]
    per_category = {
        cat: pool_auc([s for s in scored if s.record.category == cat] + normals)
        for cat in present
    }

    if view is not None:
        subset = [s for s in scored if s.record.view == view]
        if not subset:
            raise ValidationError(f"no {split!r} videos with view {view}")
        view_auc = roc_auc(
            np.concatenate([s.frames for s in subset]),
            np.concatenate([s.labels for s in subset]),
        )
        return AucReport(
            overall=view_auc,
            per_category=per_category,
            per_view={view: view_auc},
            single_view=view_auc,
        )

    per_view = {}
    for v in (0, 1):
        subset = [s for s in scored if s.record.view == v]
        if subset:
            per_view[v] = roc_auc(
                np.concatenate([s.frames for s in subset]),
                np.concatenate([s.labels for s in subset]),
            )
    single_view = float(np.mean(list(per_view.values()))) if per_view else float("nan")

    overall_videos = scored if category is None else (
        [s for s in scored if s.record.category == category] + normals
    )
    overall = pool_auc(overall_videos)
    return AucReport(
        overall=overall,
        per_category=per_category,
        per_view=per_view,
        single_view=single_view,
    )


def multi_seed_average(reports: Sequence[AucReport]) -> AucReport:
    """Field-wise arithmetic mean; per-seed reports are retained."""
    if not reports:
        raise ValidationError("cannot average zero reports")
    cat_keys = set(reports[0].per_category)
    view_keys = set(reports[0].per_view)
    for rep in reports[1:]:
        if set(rep.per_category) != cat_keys or set(rep.per_view) != view_keys:
            raise ValidationError("report shapes differ; cannot average")
    seeds: tuple[int, ...] = ()
    for rep in reports:
        seeds = seeds + rep.seeds
    return AucReport(
        overall=float(np.mean([r.overall for r in reports])),
        per_category={
            c: float(np.mean([r.per_category[c] for r in reports])) for c in sorted(cat_keys)
        },
        per_view={
            v: float(np.mean([r.per_view[v] for r in reports])) for v in sorted(view_keys)
        },
        single_view=float(np.mean([r.single_view for r in reports])),
        seeds=seeds,
        per_seed=tuple(reports),
    )


@dataclass(frozen=True)
class ExperimentMatrixConfig:
    target_manifest: Manifest
    source_manifest: Manifest
    out_dir: Path
    adaptation: AdaptationHyper = AdaptationHyper()
    class_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_CLASS_MAP))
    detector: DetectorHyper = DetectorHyper()
    seeds: tuple[int, ...] = (0, 1, 2)
    include_oracle: bool = True
    shift: ShiftSpec | None = None
    fusion: str = FUSION_MAX

    def __post_init__(self):
        if self.source_manifest is None:
            raise ValidationError("experiment matrix needs a source manifest")
        if self.target_manifest is None:
            raise ValidationError("experiment matrix needs a target manifest")
        if not self.seeds:
            raise ValidationError("experiment matrix needs at least one seed")
        if any(int(s) < 0 for s in self.seeds):
            raise ValidationError("seeds must be non-negative")
        if self.include_oracle and self.shift is None:
            raise ValidationError("oracle arm requested but no shift record given")


@dataclass
class MatrixReport:
    settings: dict[str, AucReport]
    seeds: tuple[int, ...]
    feature_paths_read: frozenset[str]

    def csv_text(self) -> str:
        categories = sorted(
            {c for rep in self.settings.values() for c in rep.per_category}
        )
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["setting", "seed", "overall"]
            + [f"category_{c}" for c in categories]
            + ["view_0", "view_1", "single_view"]
        )

        def row(setting: str, seed: str, rep: AucReport) -> list:
            return (
                [setting, seed, f"{rep.overall:.6f}"]
                + [f"{rep.per_category[c]:.6f}" for c in categories]
                + [
                    f"{rep.per_view.get(0, float('nan')):.6f}",
                    f"{rep.per_view.get(1, float('nan')):.6f}",
                    f"{rep.single_view:.6f}",
                ]
            )

        for setting, agg in self.settings.items():
            for seed, rep in zip(self.seeds, agg.per_seed):
                writer.writerow(row(setting, str(seed), rep))
            writer.writerow(row(setting, "mean", agg))
        return buf.getvalue()

    def summary_text(self) -> str:
        width = max(len(s) for s in self.settings)
        lines = [f"{'setting'.ljust(width)}  mean_auc  per_seed"]
        for setting, agg in self.settings.items():
            per_seed = " ".join(f"{r.overall:.4f}" for r in agg.per_seed)
            lines.append(f"{setting.ljust(width)}  {agg.overall:.4f}    {per_seed}")
        return "\n".join(lines) + "\n"


def experiment_matrix(config: ExperimentMatrixConfig) -> MatrixReport:
    """Train and evaluate the comparison arms over every seed.

    Per seed: (a) target train only, (b) target plus a balanced subsample of
    raw source train, (c) target plus balanced adapted source train, and
    optionally (d) the same with the exact oracle alignment. Every arm shares
    the seed's detector stream, so arms differ only through training data.
    All evaluation happens on the target TEST split.
    """
    cache = FeatureCache()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = config.target_manifest
    source = config.source_manifest

    target_train = load_videos(target, split="train", cache=cache)
    source_train = load_videos(source, split="train", cache=cache)

    setting_names = [
        SETTING_TARGET_ONLY,
        SETTING_WITH_RAW_SOURCE,
        SETTING_WITH_ADAPTED_SOURCE,
    ]
    if config.include_oracle:
        setting_names.append(SETTING_WITH_ORACLE_SOURCE)
    per_setting: dict[str, list[AucReport]] = {name: [] for name in setting_names}

    for seed in config.seeds:
        seed = int(seed)
        det_seed = [seed, _DETECTOR_STREAM]
        merge_seed = [seed, _MERGE_STREAM]
        train_sets: dict[str, list[LoadedVideo]] = {
            SETTING_TARGET_ONLY: list(target_train)
        }
        train_sets[SETTING_WITH_RAW_SOURCE] = balanced_merge(
            target_train, source_train, merge_seed
        )
        adapted_manifest, _ = adapt_dataset(
            source,
            target,
            config.class_map,
            config.adaptation,
            [seed, _ADAPT_STREAM],
            out / f"seed{seed}" / "adapted",
            cache=cache,
        )
        adapted_train = load_videos(adapted_manifest, split="train", cache=cache)
        train_sets[SETTING_WITH_ADAPTED_SOURCE] = balanced_merge(
            target_train, adapted_train, merge_seed
        )
        if config.include_oracle:
            oracle_manifest = oracle_align_dataset(
                source, config.shift, out / f"seed{seed}" / "oracle"
            )
            oracle_train = load_videos(oracle_manifest, split="train", cache=cache)
            train_sets[SETTING_WITH_ORACLE_SOURCE] = balanced_merge(
                target_train, oracle_train, merge_seed
            )
        for name in setting_names:
            detector, _ = train_detector(train_sets[name], config.detector, det_seed)
            report = evaluate_detector(
                detector, target, split="test", fusion=config.fusion, cache=cache
            )
            per_setting[name].append(replace(report, seeds=(seed,)))

    aggregated = {name: multi_seed_average(reps) for name, reps in per_setting.items()}
    matrix = MatrixReport(
        settings=aggregated,
        seeds=tuple(int(s) for s in config.seeds),
        feature_paths_read=frozenset(cache.paths_read),
    )
    (out / "report.csv").write_text(matrix.csv_text())
    (out / "summary.txt").write_text(matrix.summary_text())
    print(matrix.summary_text(), end="")
    return matrix
