"""Class-wise adversarial feature adaptation with a gradient-penalty critic.

For each mapped class pair, a residual feature adaptor G(x) = x + net(x) is
trained against a scalar critic: the critic minimizes
E[D(G(Xs))] - E[D(Xt)] + lambda_gp * E[(||grad D(Xhat)|| - 1)^2] and the
adaptor minimizes -E[D(G(Xs))]. Interpolates Xhat mix adapted source and
target rows. Adapted TRAIN features are rewritten into a new dataset that
detectors can consume in place of the originals.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .nn import (
    INIT_HE_UNIFORM,
    INIT_ZERO_LAST_LAYER,
    LEAKY_RELU,
    MlpParams,
    MlpSpec,
    add_grads,
    adam_step,
    backward_from_trace,
    forward_trace,
    init_adam,
    input_gradients_from_trace,
    mlp_forward,
    penalty_gradients,
    save_mlp,
)
from .seeding import child_rng, seed_list
from .store import (
    FIGHTING,
    NORMAL,
    SHOOTING,
    STABBING,
    FeatureCache,
    Manifest,
    SnippetMatrix,
    save_manifest,
    write_feature_file,
)

DEFAULT_CLASS_MAP: dict[str, str] = {
    STABBING: FIGHTING,
    SHOOTING: SHOOTING,
    NORMAL: NORMAL,
}

_CATEGORY_CODES = {NORMAL: 0, SHOOTING: 1, STABBING: 2, FIGHTING: 3}
_ADAPTOR_INIT_STREAM = 21
_CRITIC_INIT_STREAM = 22
_BATCH_STREAM = 23
_CLASS_STREAM = 24


@dataclass(frozen=True)
class AdaptationHyper:
    """Training hyperparameters for one class-pair adaptation."""

    lambda_gp: float = 10.0
    critic_steps: int = 5
    batch_size: int = 64
    iterations: int = 2000
    adaptor_lr: float = 1e-4
    critic_lr: float = 1e-4
    adaptor_hidden: int = 0  # 0 means d
    critic_hidden: tuple[int, int] = (0, 0)  # zeros mean (d, d // 2)
    adaptor_ema: float = 0.999  # 0 disables weight averaging
    flip_critic_sign: bool = False

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValidationError("lambda_gp must be >= 0")
        if self.critic_steps < 1 or self.batch_size < 1:
            raise ValidationError("critic_steps and batch_size must be >= 1")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.adaptor_lr <= 0 or self.critic_lr <= 0:
            raise ValidationError("learning rates must be > 0")
        if not (0.0 <= self.adaptor_ema < 1.0):
            raise ValidationError("adaptor_ema must be in [0, 1)")
        object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))

    def adaptor_spec(self, d: int) -> MlpSpec:
        hidden = self.adaptor_hidden or d
        return MlpSpec(layer_sizes=(d, hidden, d))

    def critic_spec(self, d: int) -> MlpSpec:
        h1 = self.critic_hidden[0] or d
        h2 = self.critic_hidden[1] or max(d // 2, 1)
        return MlpSpec(
            layer_sizes=(d, h1, h2, 1),
            hidden_activation=LEAKY_RELU,
            leaky_slope=0.2,
        )


@dataclass
class ClassAdaptationResult:
    """Outcome of adapting one class pair."""

    adaptor: MlpParams  # residual core; the map applied is x + core(x)
    critic: MlpParams
    history: dict[str, list[float]]
    seed: list[int]
    adaptor_steps: int
    critic_steps_taken: int


def apply_adaptor(core: MlpParams, x: np.ndarray) -> np.ndarray:
    """Residual adaptor output x + core(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x + mlp_forward(core, x)


def interpolate(
    g_xs: np.ndarray, xt: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Per-row convex mix eps*xt + (1-eps)*g_xs with eps uniform in [0, 1)."""
    g_xs = np.asarray(g_xs, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    if g_xs.shape != xt.shape:
        raise ValidationError(
            f"batch shapes differ: {g_xs.shape} vs {xt.shape}"
        )
    eps = rng.random((g_xs.shape[0], 1))
    return eps * xt + (1.0 - eps) * g_xs


def adaptor_loss(critic: MlpParams, g_xs_batch: np.ndarray) -> float:
    """Negative mean critic score over the adapted source batch."""
    g_xs_batch = np.asarray(g_xs_batch, dtype=np.float64)
    if g_xs_batch.shape[0] < 1:
        raise ValidationError("adaptor loss needs a non-empty batch")
    return -float(np.mean(mlp_forward(critic, g_xs_batch)))


def critic_loss(
    critic: MlpParams,
    xt_batch: np.ndarray,
    g_xs_batch: np.ndarray,
    lambda_gp: float,
    rng: np.random.Generator,
    flip_sign: bool = False,
) -> tuple[float, float]:
    """Critic objective and its penalty component.

    Default orientation: mean D over adapted source minus mean D over target,
    plus the gradient penalty on interpolates. `flip_sign` negates the two
    data terms, reproducing the alternative orientation in which the critic
    pushes in the same direction as the adaptor; kept for comparison runs.
    """
    xt_batch = np.asarray(xt_batch, dtype=np.float64)
    g_xs_batch = np.asarray(g_xs_batch, dtype=np.float64)
    if xt_batch.shape[0] < 1 or g_xs_batch.shape[0] < 1:
        raise ValidationError("critic loss needs non-empty batches")
    sign = -1.0 if flip_sign else 1.0
    base = sign * (
        float(np.mean(mlp_forward(critic, g_xs_batch)))
        - float(np.mean(mlp_forward(critic, xt_batch)))
    )
    xhat = interpolate(g_xs_batch, xt_batch, rng)
    penalty, _ = penalty_gradients(critic, xhat, lambda_gp)
    return base + penalty, penalty


def train_class_adaptation(
    source_feats: np.ndarray,
    target_feats: np.ndarray,
    hyper: AdaptationHyper,
    seed,
    class_name: str = "",
) -> ClassAdaptationResult:
    """Alternating critic/adaptor training on one class pair's snippet pools.

    Per iteration: `critic_steps` Adam updates of the critic on fresh batches
    (with the penalty's second-order gradients), then one Adam update of the
    adaptor with the critic frozen. Batches are drawn with replacement from
    the snippet pools; everything is deterministic per seed.
    """
    label = f" for class {class_name!r}" if class_name else ""
    source = np.ascontiguousarray(source_feats, dtype=np.float64)
    target = np.ascontiguousarray(target_feats, dtype=np.float64)
    if source.ndim != 2 or source.shape[0] < 1:
        raise ValidationError(f"empty source snippet pool{label}")
    if target.ndim != 2 or target.shape[0] < 1:
        raise ValidationError(f"empty target snippet pool{label}")
    if source.shape[1] != target.shape[1]:
        raise ValidationError(
            f"pool dimensions differ{label}: {source.shape[1]} vs {target.shape[1]}"
        )
    d = source.shape[1]
    seeds = seed_list(seed)
    core = init_mlp_for_adaptor(hyper, d, seeds)
    critic = init_mlp_for_critic(hyper, d, seeds)
    # Min-max training oscillates around its equilibrium; what gets returned
    # is a bias-corrected moving average of the adaptor weights, which
    # stabilizes the final map without touching the adversarial dynamics.
    ema_w = [np.zeros_like(w) for w in core.weights]
    ema_b = [np.zeros_like(b) for b in core.biases]
    a_state = init_adam(core, alpha=hyper.adaptor_lr, beta1=0.0, beta2=0.9)
    c_state = init_adam(critic, alpha=hyper.critic_lr, beta1=0.0, beta2=0.9)
    rng = child_rng(seeds, _BATCH_STREAM)
    batch = hyper.batch_size
    sign = -1.0 if hyper.flip_critic_sign else 1.0

    history: dict[str, list[float]] = {
        "critic_objective": [],
        "penalty": [],
        "adaptor_loss": [],
    }
    critic_steps_taken = 0
    for _ in range(hyper.iterations):
        last_obj = last_pen = 0.0
        for _ in range(hyper.critic_steps):
            xs = source[rng.integers(0, source.shape[0], size=batch)]
            xt = target[rng.integers(0, target.shape[0], size=batch)]
            gxs = apply_adaptor(core, xs)
            fake = forward_trace(critic, gxs)
            real = forward_trace(critic, xt)
            g_fake, _ = backward_from_trace(
                critic, fake, np.full((batch, 1), sign / batch)
            )
            g_real, _ = backward_from_trace(
                critic, real, np.full((batch, 1), -sign / batch)
            )
            xhat = interpolate(gxs, xt, rng)
            pen_value, g_pen = penalty_gradients(critic, xhat, hyper.lambda_gp)
            critic, c_state = adam_step(critic, add_grads(g_fake, g_real, g_pen), c_state)
            last_obj = (
                sign * (float(np.mean(fake.output)) - float(np.mean(real.output)))
                + pen_value
            )
            last_pen = pen_value
            critic_steps_taken += 1
        xs = source[rng.integers(0, source.shape[0], size=batch)]
        core_trace = forward_trace(core, xs)
        gxs = xs + core_trace.output
        critic_trace = forward_trace(critic, gxs)
        # d(-mean D(G(x)))/dG flows through the residual branch unchanged.
        upstream = -input_gradients_from_trace(critic, critic_trace) / batch
        a_grads, _ = backward_from_trace(core, core_trace, upstream)
        core, a_state = adam_step(core, a_grads, a_state)
        decay = hyper.adaptor_ema
        for l in range(len(ema_w)):
            ema_w[l] = decay * ema_w[l] + (1.0 - decay) * core.weights[l]
            ema_b[l] = decay * ema_b[l] + (1.0 - decay) * core.biases[l]
        history["critic_objective"].append(last_obj)
        history["penalty"].append(last_pen)
        history["adaptor_loss"].append(-float(np.mean(critic_trace.output)))
    adaptor = core
    if hyper.adaptor_ema > 0 and hyper.iterations > 0:
        correction = 1.0 - hyper.adaptor_ema ** hyper.iterations
        adaptor = MlpParams(
            spec=core.spec,
            weights=[w / correction for w in ema_w],
            biases=[b / correction for b in ema_b],
        )
    return ClassAdaptationResult(
        adaptor=adaptor,
        critic=critic,
        history=history,
        seed=seeds,
        adaptor_steps=hyper.iterations,
        critic_steps_taken=critic_steps_taken,
    )


def init_mlp_for_adaptor(hyper: AdaptationHyper, d: int, seeds) -> MlpParams:
    from .nn import init_mlp

    return init_mlp(
        hyper.adaptor_spec(d), INIT_ZERO_LAST_LAYER, seed_list(seeds) + [_ADAPTOR_INIT_STREAM]
    )


def init_mlp_for_critic(hyper: AdaptationHyper, d: int, seeds) -> MlpParams:
    from .nn import init_mlp

    return init_mlp(
        hyper.critic_spec(d), INIT_HE_UNIFORM, seed_list(seeds) + [_CRITIC_INIT_STREAM]
    )


def history_csv(history: dict[str, list[float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "critic_objective", "penalty", "adaptor_loss"])
    for i in range(len(history["critic_objective"])):
        writer.writerow(
            [
                i,
                repr(history["critic_objective"][i]),
                repr(history["penalty"][i]),
                repr(history["adaptor_loss"][i]),
            ]
        )
    return buf.getvalue()


def _class_pool(
    manifest: Manifest, category: str, cache: FeatureCache
) -> tuple[list, np.ndarray]:
    records = manifest.records(split="train", category=category)
    if not records:
        raise ValidationError(
            f"no train videos of class {category!r} in manifest"
        )
    mats = [cache.load(manifest, rec).values.astype(np.float64) for rec in records]
    return records, np.vstack(mats)


def adapt_dataset(
    source_manifest: Manifest,
    target_manifest: Manifest,
    class_map: dict[str, str],
    hyper: AdaptationHyper,
    seed,
    out_dir: str | Path,
    cache: FeatureCache | None = None,
) -> tuple[Manifest, dict[str, ClassAdaptationResult]]:
    """Train one adaptor per class pair and rewrite source TRAIN features.

    Only TRAIN-split source snippets are adapted and emitted; the adapted
    manifest carries train records only, so source test data can never leak
    into downstream evaluation. Checkpoints and histories are written next to
    the adapted features.
    """
    if source_manifest.d != target_manifest.d:
        raise ValidationError(
            f"manifest dimensions differ: {source_manifest.d} vs {target_manifest.d}"
        )
    values = list(class_map.values())
    if len(set(class_map)) != len(class_map) or len(set(values)) != len(values):
        raise ValidationError("class map must be injective")
    source_categories = source_manifest.categories(split="train")
    unmapped = [c for c in source_categories if c not in class_map]
    if unmapped:
        raise ValidationError(
            f"class map missing source classes {unmapped}; every train class needs a target"
        )
    target_categories = set(target_manifest.categories(split="train"))
    for src_cat, tgt_cat in class_map.items():
        if src_cat not in source_categories:
            raise ValidationError(
                f"class map source class {src_cat!r} not present in source train split"
            )
        if tgt_cat not in target_categories:
            raise ValidationError(
                f"class map target class {tgt_cat!r} not present in target train split"
            )

    cache = cache if cache is not None else FeatureCache()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "adaptors").mkdir(exist_ok=True)
    seeds = seed_list(seed)

    results: dict[str, ClassAdaptationResult] = {}
    adapted_records = []
    for src_cat in sorted(class_map):
        tgt_cat = class_map[src_cat]
        src_records, src_pool = _class_pool(source_manifest, src_cat, cache)
        _, tgt_pool = _class_pool(target_manifest, tgt_cat, cache)
        result = train_class_adaptation(
            src_pool,
            tgt_pool,
            hyper,
            seeds + [_CLASS_STREAM, _CATEGORY_CODES[src_cat]],
            class_name=src_cat,
        )
        results[src_cat] = result
        for rec in src_records:
            matrix = cache.load(source_manifest, rec)
            adapted = apply_adaptor(result.adaptor, matrix.values.astype(np.float64))
            write_feature_file(
                SnippetMatrix(values=adapted.astype(np.float32), snippet_len=matrix.snippet_len),
                out / rec.feature_path,
            )
            adapted_records.append(rec)
        save_mlp(
            result.adaptor,
            out / "adaptors" / f"{src_cat}.mlpw",
            provenance={
                "kind": "residual_adaptor_core",
                "source_class": src_cat,
                "target_class": tgt_cat,
                "seed": result.seed,
            },
        )
        (out / "adaptors" / f"{src_cat}_history.csv").write_text(
            history_csv(result.history)
        )

    adapted_manifest = Manifest(
        d=source_manifest.d,
        snippet_len=source_manifest.snippet_len,
        videos=adapted_records,
        root=out,
        provenance={
            "kind": "adapted",
            "seed": seeds,
            "class_map": dict(class_map),
            "hyper": asdict(hyper),
            "source": source_manifest.provenance,
            "target": target_manifest.provenance,
        },
    )
    adapted_manifest.validate()
    save_manifest(adapted_manifest, out / "manifest.json")
    return adapted_manifest, results
