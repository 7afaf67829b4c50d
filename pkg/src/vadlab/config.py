"""Run configuration: one JSON document covering every pipeline stage.

Sections: generation, adaptation, detector, evaluation, experiment, plus a
global seed. Unknown keys are rejected so typos fail loudly instead of
silently falling back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adapt import DEFAULT_CLASS_MAP, AdaptationHyper
from .detector import MODE_SUPERVISED, MODE_WEAK, DetectorHyper
from .errors import ValidationError
from .evaluate import FUSION_MAX, FUSION_MEAN
from .scenegen import ClassCounts, GenerationSpec, default_counts
from .store import DOMAIN_CATEGORIES, DOMAINS


@dataclass(frozen=True)
class EvaluationConfig:
    fusion: str = FUSION_MAX
    concat_views: bool = False

    def __post_init__(self):
        if self.fusion not in (FUSION_MAX, FUSION_MEAN):
            raise ValidationError(f"unknown fusion rule {self.fusion!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    include_oracle: bool = True
    source_manifest: str | None = None
    target_manifest: str | None = None
    shift: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    generation: GenerationSpec = field(default_factory=GenerationSpec)
    adaptation: AdaptationHyper = field(default_factory=AdaptationHyper)
    class_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_CLASS_MAP))
    detector: DetectorHyper = field(default_factory=DetectorHyper)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


def _strict_kwargs(cls, data: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(data)


def _parse_counts(data: dict, where: str) -> dict:
    counts = {}
    for domain, per_class in data.items():
        if domain not in DOMAINS:
            raise ValidationError(f"unknown domain {domain!r} in {where}")
        counts[domain] = {}
        for category, pair in per_class.items():
            if category not in DOMAIN_CATEGORIES[domain]:
                raise ValidationError(
                    f"category {category!r} not allowed in domain {domain!r} ({where})"
                )
            if len(pair) != 2:
                raise ValidationError(
                    f"{where}: counts for {domain}/{category} must be [train, test]"
                )
            counts[domain][category] = ClassCounts(int(pair[0]), int(pair[1]))
    return counts


def _parse_generation(data: dict) -> GenerationSpec:
    kwargs = _strict_kwargs(GenerationSpec, data, "generation")
    if "counts" in kwargs:
        kwargs["counts"] = _parse_counts(kwargs["counts"], "generation.counts")
    if "abnormal_window" in kwargs:
        kwargs["abnormal_window"] = tuple(kwargs["abnormal_window"])
    return GenerationSpec(**kwargs)


def _parse_adaptation(data: dict) -> tuple[AdaptationHyper, dict[str, str]]:
    data = dict(data)
    class_map = data.pop("class_map", None)
    kwargs = _strict_kwargs(AdaptationHyper, data, "adaptation")
    hyper = AdaptationHyper(**kwargs)
    if class_map is None:
        class_map = dict(DEFAULT_CLASS_MAP)
    return hyper, dict(class_map)


def _parse_detector(data: dict) -> DetectorHyper:
    kwargs = _strict_kwargs(DetectorHyper, data, "detector")
    if "hidden_sizes" in kwargs:
        kwargs["hidden_sizes"] = tuple(kwargs["hidden_sizes"])
    if kwargs.get("mode") == "weak":
        kwargs["mode"] = MODE_WEAK
    return DetectorHyper(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    doc = _strict_kwargs(RunConfig, dict(doc), "config")
    out: dict = {}
    if "seed" in doc:
        out["seed"] = int(doc["seed"])
    if "generation" in doc:
        out["generation"] = _parse_generation(doc["generation"])
    if "adaptation" in doc:
        hyper, class_map = _parse_adaptation(doc["adaptation"])
        out["adaptation"] = hyper
        out["class_map"] = class_map
    if "class_map" in doc:
        out["class_map"] = dict(doc["class_map"])
    if "detector" in doc:
        out["detector"] = _parse_detector(doc["detector"])
    if "evaluation" in doc:
        out["evaluation"] = EvaluationConfig(
            **_strict_kwargs(EvaluationConfig, doc["evaluation"], "evaluation")
        )
    if "experiment" in doc:
        out["experiment"] = ExperimentConfig(
            **_strict_kwargs(ExperimentConfig, doc["experiment"], "experiment")
        )
    return RunConfig(**out)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: cannot parse config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config root must be an object")
    return config_from_dict(doc)


def config_snapshot(config: RunConfig) -> dict:
    """JSON-serializable snapshot of a run configuration, for provenance."""
    from dataclasses import asdict

    from .scenegen import generation_spec_to_dict

    return {
        "seed": config.seed,
        "generation": generation_spec_to_dict(config.generation),
        "adaptation": asdict(config.adaptation),
        "class_map": dict(config.class_map),
        "detector": asdict(config.detector),
        "evaluation": asdict(config.evaluation),
        "experiment": asdict(config.experiment),
    }
