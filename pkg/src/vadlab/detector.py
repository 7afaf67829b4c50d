"""Snippet-level anomaly scorer trained weakly (MIL ranking) or fully supervised.

The scorer is a sigmoid-output MLP over snippet features. Weak training
samples (abnormal, normal) video pairs and ranks top-k mean snippet scores
with smoothness and sparsity regularizers on the abnormal video; supervised
training uses per-snippet binary cross-entropy against frame-derived labels.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .nn import (
    INIT_HE_UNIFORM,
    MlpParams,
    MlpSpec,
    SIGMOID,
    adam_step,
    backward_from_trace,
    forward_trace,
    init_adam,
    init_mlp,
    load_mlp,
    mlp_forward,
    save_mlp,
)
from .seeding import child_rng, seed_list
from .store import (
    NORMAL,
    FeatureCache,
    LoadedVideo,
    Manifest,
    SnippetMatrix,
    load_videos,
    snippet_labels,
)

MODE_WEAK = "weak_mil"
MODE_SUPERVISED = "supervised"

_INIT_STREAM = 31
_SAMPLE_STREAM = 32

SCORE_CLAMP = 1e-7


@dataclass(frozen=True)
class DetectorHyper:
    mode: str = MODE_WEAK
    top_k: int = 3
    margin: float = 1.0
    lambda_smooth: float = 8e-5
    lambda_sparse: float = 8e-5
    epochs: int = 30
    batch_pairs: int = 8
    hidden_sizes: tuple[int, ...] = (512, 32)
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.mode not in (MODE_WEAK, MODE_SUPERVISED):
            raise ValidationError(f"unknown detector mode {self.mode!r}")
        if self.top_k < 1:
            raise ValidationError("top_k must be >= 1")
        if self.margin < 0 or self.lambda_smooth < 0 or self.lambda_sparse < 0:
            raise ValidationError("margin and regularizer weights must be >= 0")
        if self.epochs < 1 or self.batch_pairs < 1:
            raise ValidationError("epochs and batch_pairs must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    def scorer_spec(self, d: int) -> MlpSpec:
        return MlpSpec(
            layer_sizes=(d, *self.hidden_sizes, 1),
            output_activation=SIGMOID,
        )


@dataclass
class Detector:
    params: MlpParams
    hyper: DetectorHyper
    provenance: dict

    @property
    def dim(self) -> int:
        return self.params.spec.in_dim


def score_video(detector: Detector, matrix: SnippetMatrix) -> np.ndarray:
    """Per-snippet anomaly scores in (0, 1); pure function of its inputs."""
    if matrix.dim != detector.dim:
        raise ValidationError(
            f"feature dimension {matrix.dim} != detector dimension {detector.dim}"
        )
    return mlp_forward(detector.params, matrix.values.astype(np.float64))[:, 0]


def _topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on negated values: ties resolve to the lower index.
    return np.argsort(-values, kind="stable")[:k]


def topk_mean(values: Sequence[float], k: int) -> float:
    """Mean of the k largest values; ties break toward lower indices."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ValidationError(f"expected a 1-D sequence, got shape {values.shape}")
    if not (1 <= k <= values.shape[0]):
        raise ValidationError(f"k={k} out of range for {values.shape[0]} values")
    return float(np.mean(values[_topk_indices(values, k)]))


def _mil_terms(
    abn: np.ndarray, nrm: np.ndarray, hyper: DetectorHyper
) -> tuple[float, np.ndarray, np.ndarray]:
    """MIL ranking loss and its gradients w.r.t. the two score sequences."""
    k_abn = min(hyper.top_k, abn.shape[0])
    k_nrm = min(hyper.top_k, nrm.shape[0])
    idx_a = _topk_indices(abn, k_abn)
    idx_n = _topk_indices(nrm, k_nrm)
    top_a = float(np.mean(abn[idx_a]))
    top_n = float(np.mean(nrm[idx_n]))
    hinge = hyper.margin - top_a + top_n
    d_abn = np.zeros_like(abn)
    d_nrm = np.zeros_like(nrm)
    loss = 0.0
    if hinge > 0.0:
        loss += hinge
        d_abn[idx_a] -= 1.0 / k_abn
        d_nrm[idx_n] += 1.0 / k_nrm
    diffs = abn[:-1] - abn[1:]
    loss += hyper.lambda_smooth * float(np.sum(diffs * diffs))
    d_abn[:-1] += hyper.lambda_smooth * 2.0 * diffs
    d_abn[1:] -= hyper.lambda_smooth * 2.0 * diffs
    loss += hyper.lambda_sparse * float(np.sum(abn))
    d_abn += hyper.lambda_sparse
    return loss, d_abn, d_nrm


def mil_loss(
    abn_scores: Sequence[float], nrm_scores: Sequence[float], hyper: DetectorHyper
) -> float:
    """Ranking hinge between top-k means plus smoothness and sparsity terms."""
    abn = np.asarray(abn_scores, dtype=np.float64)
    nrm = np.asarray(nrm_scores, dtype=np.float64)
    if abn.size == 0 or nrm.size == 0:
        raise ValidationError("mil_loss needs non-empty score sequences")
    loss, _, _ = _mil_terms(abn, nrm, hyper)
    return loss


def _bce_terms(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    clamped = np.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    losses = -(labels * np.log(clamped) + (1.0 - labels) * np.log(1.0 - clamped))
    grads = (-labels / clamped + (1.0 - labels) / (1.0 - clamped)) / scores.shape[0]
    grads = np.where((scores > SCORE_CLAMP) & (scores < 1.0 - SCORE_CLAMP), grads, 0.0)
    return float(np.mean(losses)), grads


def supervised_loss(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7]."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValidationError(
            f"scores and labels must be equal-length 1-D sequences, got "
            f"{scores.shape} and {labels.shape}"
        )
    loss, _ = _bce_terms(scores, labels)
    return loss


def _as_loaded_videos(source, cache: FeatureCache | None) -> list[LoadedVideo]:
    if isinstance(source, Manifest):
        return load_videos(source, split="train", cache=cache)
    videos: list[LoadedVideo] = []
    for item in source:
        if isinstance(item, Manifest):
            videos.extend(load_videos(item, split="train", cache=cache))
        elif isinstance(item, LoadedVideo):
            videos.append(item)
        else:
            raise ValidationError(
                f"expected manifests or loaded videos, got {type(item).__name__}"
            )
    return videos


def train_detector(
    train_source,
    hyper: DetectorHyper,
    seed,
    cache: FeatureCache | None = None,
) -> tuple[Detector, list[tuple[int, float]]]:
    """Train a detector; returns it with the (step, loss) training curve.

    `train_source` is a manifest, a sequence of manifests, or a sequence of
    already-loaded videos (manifests contribute their TRAIN split). Weak mode
    needs both abnormal and normal videos; each step draws `batch_pairs`
    video pairs (weak) or videos (supervised) with replacement, deterministic
    per seed.
    """
    videos = _as_loaded_videos(train_source, cache)
    if not videos:
        raise ValidationError("no training videos")
    for v in videos:
        v.record.validate()
    d = videos[0].features.dim
    if any(v.features.dim != d for v in videos):
        raise ValidationError("training videos mix feature dimensions")
    snippet_len = videos[0].features.snippet_len

    feats = [v.features.values.astype(np.float64) for v in videos]
    labels = [
        snippet_labels(v.record.abnormal_ranges, v.record.frame_count, snippet_len).astype(
            np.float64
        )
        for v in videos
    ]
    abn_idx = [i for i, v in enumerate(videos) if v.record.category != NORMAL]
    nrm_idx = [i for i, v in enumerate(videos) if v.record.category == NORMAL]

    if hyper.mode == MODE_WEAK:
        if not abn_idx or not nrm_idx:
            raise ValidationError(
                "weak training needs both abnormal and normal train videos"
            )
        steps_per_epoch = math.ceil(len(abn_idx) / hyper.batch_pairs)
    else:
        steps_per_epoch = math.ceil(len(videos) / hyper.batch_pairs)

    seeds = seed_list(seed)
    params = init_mlp(hyper.scorer_spec(d), INIT_HE_UNIFORM, seeds + [_INIT_STREAM])
    state = init_adam(params, alpha=hyper.learning_rate, beta1=0.9, beta2=0.999)
    rng = child_rng(seeds, _SAMPLE_STREAM)

    curve: list[tuple[int, float]] = []
    total_steps = hyper.epochs * steps_per_epoch
    for step in range(total_steps):
        if hyper.mode == MODE_WEAK:
            picked_a = rng.integers(0, len(abn_idx), size=hyper.batch_pairs)
            picked_n = rng.integers(0, len(nrm_idx), size=hyper.batch_pairs)
            chosen = [abn_idx[i] for i in picked_a] + [nrm_idx[i] for i in picked_n]
        else:
            chosen = list(rng.integers(0, len(videos), size=hyper.batch_pairs))
        mats = [feats[i] for i in chosen]
        lengths = [m.shape[0] for m in mats]
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        x = np.vstack(mats)
        trace = forward_trace(params, x)
        scores = trace.output[:, 0]
        upstream = np.zeros_like(scores)
        loss = 0.0
        if hyper.mode == MODE_WEAK:
            pairs = hyper.batch_pairs
            for p in range(pairs):
                sl_a = slice(offsets[p], offsets[p + 1])
                sl_n = slice(offsets[pairs + p], offsets[pairs + p + 1])
                pair_loss, d_abn, d_nrm = _mil_terms(scores[sl_a], scores[sl_n], hyper)
                loss += pair_loss / pairs
                upstream[sl_a] += d_abn / pairs
                upstream[sl_n] += d_nrm / pairs
        else:
            count = len(chosen)
            for p, vid in enumerate(chosen):
                sl = slice(offsets[p], offsets[p + 1])
                vid_loss, d_scores = _bce_terms(scores[sl], labels[vid])
                loss += vid_loss / count
                upstream[sl] += d_scores / count
        grads, _ = backward_from_trace(params, trace, upstream[:, None])
        params, state = adam_step(params, grads, state)
        curve.append((step, loss))

    digest = hashlib.sha256("\n".join(v.record.id for v in videos).encode()).hexdigest()
    detector = Detector(
        params=params,
        hyper=hyper,
        provenance={
            "mode": hyper.mode,
            "seed": seeds,
            "num_videos": len(videos),
            "video_ids_sha256": digest,
        },
    )
    return detector, curve


def curve_csv(curve: list[tuple[int, float]]) -> str:
    lines = ["step,loss"]
    lines += [f"{step},{loss!r}" for step, loss in curve]
    return "\n".join(lines) + "\n"


def save_detector(detector: Detector, path: str | Path) -> None:
    save_mlp(
        detector.params,
        path,
        provenance={
            "detector_hyper": asdict(detector.hyper),
            "training": detector.provenance,
        },
    )


def load_detector(path: str | Path) -> Detector:
    params, provenance = load_mlp(path)
    hyper_doc = provenance.get("detector_hyper")
    if hyper_doc is None:
        raise ValidationError(f"{path}: checkpoint has no detector header")
    hyper_doc = dict(hyper_doc)
    hyper_doc["hidden_sizes"] = tuple(hyper_doc.get("hidden_sizes", ()))
    hyper = DetectorHyper(**hyper_doc)
    return Detector(params=params, hyper=hyper, provenance=provenance.get("training", {}))
