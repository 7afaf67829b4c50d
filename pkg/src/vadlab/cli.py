"""Command-line entry point: generate, adapt, train, eval, stats, experiment.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation or
format error. Every run writes a provenance file (config snapshot, seed,
content hashes of input manifests) into its output location.

Heavy modules are imported inside the handlers so the VADLAB_THREADS
environment variable can cap BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_env() -> None:
    threads = os.environ.get("VADLAB_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vadlab",
        description=(
            "Synthetic two-domain anomaly feature datasets, adversarial feature "
            "adaptation, MIL anomaly detection, and an exact-AUC experiment harness."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a two-domain labeled feature dataset")
    p.add_argument("--config", help="JSON run config (generation section)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the generation seed")

    p = sub.add_parser("stats", help="print dataset statistics as CSV")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("adapt", help="class-wise adversarial adaptation of source features")
    p.add_argument("--source", required=True, help="source manifest path")
    p.add_argument("--target", required=True, help="target manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON run config (adaptation section)")
    p.add_argument("--lambda-gp", type=float, help="gradient penalty weight")
    p.add_argument("--iterations", type=int, help="adaptor update count")
    p.add_argument("--seed", type=int, help="override the adaptation seed")
    p.add_argument(
        "--flip-critic-sign",
        action="store_true",
        help="negate the critic's two data terms (alternative orientation)",
    )

    p = sub.add_parser("train", help="train an anomaly detector")
    p.add_argument(
        "--features",
        action="append",
        required=True,
        help="training manifest; repeat to union several",
    )
    p.add_argument("--mode", choices=("weak", "supervised"), default="weak")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="JSON run config (detector section)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a detector checkpoint")
    p.add_argument("--detector", required=True, help="checkpoint path")
    p.add_argument("--test", required=True, help="test manifest path")
    p.add_argument("--per-category", action="store_true")
    p.add_argument("--view", choices=("0", "1", "fused"), default="fused")
    p.add_argument("--out", help="optional CSV output path")

    p = sub.add_parser("experiment", help="run the three-setting comparison matrix")
    p.add_argument("--config", required=True, help="JSON run config (experiment section)")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _write_provenance(out_dir: Path, command: str, snapshot: dict, inputs: dict) -> None:
    from .store import file_sha256

    doc = {
        "command": command,
        "config": snapshot,
        "inputs": {
            name: {"path": str(path), "sha256": file_sha256(path)}
            for name, path in inputs.items()
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_run_config(path: str | None):
    from .config import RunConfig, load_config

    if path is None:
        return RunConfig()
    from .errors import ValidationError

    if not Path(path).exists():
        raise ValidationError(f"config file not found: {path}")
    return load_config(path)


def _cmd_generate(args) -> int:
    from dataclasses import replace

    from .config import config_snapshot
    from .scenegen import generate_dataset
    from .store import dataset_stats

    config = _load_run_config(args.config)
    spec = config.generation
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
        config = replace(config, generation=spec, seed=args.seed)
    out = Path(args.out)
    source, target, _ = generate_dataset(spec, out)
    _write_provenance(out, "generate", config_snapshot(config), {})
    for name, manifest in (("source", source), ("target", target)):
        stats = dataset_stats(manifest)
        print(
            f"{name}: {stats.overall.videos} videos, "
            f"{stats.overall.total_frames} frames "
            f"({stats.overall.abnormal_frames} abnormal)"
        )
    print(f"wrote {out / 'source'}, {out / 'target'}, {out / 'shift.json'}")
    return 0


def _cmd_stats(args) -> int:
    from .store import dataset_stats, load_manifest, stats_csv

    manifest = load_manifest(args.manifest)
    print(stats_csv(dataset_stats(manifest)), end="")
    return 0


def _cmd_adapt(args) -> int:
    from dataclasses import replace

    from .adapt import adapt_dataset
    from .config import config_snapshot
    from .store import load_manifest

    config = _load_run_config(args.config)
    hyper = config.adaptation
    if args.lambda_gp is not None:
        hyper = replace(hyper, lambda_gp=args.lambda_gp)
    if args.iterations is not None:
        hyper = replace(hyper, iterations=args.iterations)
    if args.flip_critic_sign:
        hyper = replace(hyper, flip_critic_sign=True)
    seed = args.seed if args.seed is not None else config.seed
    source = load_manifest(args.source)
    target = load_manifest(args.target)
    out = Path(args.out)
    adapted, results = adapt_dataset(
        source, target, config.class_map, hyper, seed, out
    )
    _write_provenance(
        out,
        "adapt",
        {**config_snapshot(replace(config, adaptation=hyper)), "seed": seed},
        {"source_manifest": args.source, "target_manifest": args.target},
    )
    for category, result in results.items():
        tail = result.history["adaptor_loss"][-1:] or [float("nan")]
        print(
            f"{category}: {result.adaptor_steps} adaptor steps, "
            f"final adaptor loss {tail[0]:.4f}"
        )
    print(f"wrote {out / 'manifest.json'} ({len(adapted.videos)} train videos)")
    return 0


def _cmd_train(args) -> int:
    from dataclasses import replace

    from .config import config_snapshot
    from .detector import MODE_SUPERVISED, MODE_WEAK, curve_csv, save_detector, train_detector
    from .store import load_manifest

    config = _load_run_config(args.config)
    mode = MODE_WEAK if args.mode == "weak" else MODE_SUPERVISED
    hyper = replace(config.detector, mode=mode)
    manifests = [load_manifest(p) for p in args.features]
    detector, curve = train_detector(manifests, hyper, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_detector(detector, out)
    out.with_suffix(out.suffix + ".curve.csv").write_text(curve_csv(curve))
    _write_provenance(
        out.parent,
        "train",
        {**config_snapshot(replace(config, detector=hyper)), "seed": args.seed},
        {f"features_{i}": p for i, p in enumerate(args.features)},
    )
    print(f"trained {mode} detector on {detector.provenance['num_videos']} videos")
    print(f"wrote {out}")
    return 0


def _cmd_eval(args) -> int:
    from .detector import load_detector
    from .evaluate import evaluate_detector
    from .store import load_manifest

    detector = load_detector(args.detector)
    manifest = load_manifest(args.test)
    view = None if args.view == "fused" else int(args.view)
    report = evaluate_detector(detector, manifest, view=view)
    lines = [f"overall_auc,{report.overall:.6f}"]
    if view is None:
        lines.append(f"single_view_auc,{report.single_view:.6f}")
        for v in sorted(report.per_view):
            lines.append(f"view_{v}_auc,{report.per_view[v]:.6f}")
    if args.per_category:
        for category in sorted(report.per_category):
            lines.append(f"category_{category}_auc,{report.per_category[category]:.6f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _cmd_experiment(args) -> int:
    from .config import config_snapshot, load_config
    from .errors import ValidationError
    from .evaluate import ExperimentMatrixConfig, experiment_matrix
    from .scenegen import load_shift
    from .store import load_manifest

    config = load_config(args.config)
    exp = config.experiment
    base = Path(args.config).parent
    if exp.source_manifest is None:
        raise ValidationError("experiment config is missing the source manifest")
    if exp.target_manifest is None:
        raise ValidationError("experiment config is missing the target manifest")

    def resolve(p: str) -> Path:
        path = Path(p)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ValidationError(f"referenced path does not exist: {path}")
        return path

    source_path = resolve(exp.source_manifest)
    target_path = resolve(exp.target_manifest)
    shift = None
    inputs = {"source_manifest": source_path, "target_manifest": target_path}
    if exp.include_oracle:
        if exp.shift is None:
            raise ValidationError("experiment config needs a shift record for the oracle arm")
        shift_path = resolve(exp.shift)
        shift = load_shift(shift_path)
        inputs["shift"] = shift_path
    matrix_config = ExperimentMatrixConfig(
        target_manifest=load_manifest(target_path),
        source_manifest=load_manifest(source_path),
        out_dir=Path(args.out),
        adaptation=config.adaptation,
        class_map=config.class_map,
        detector=config.detector,
        seeds=exp.seeds,
        include_oracle=exp.include_oracle,
        shift=shift,
        fusion=config.evaluation.fusion,
    )
    experiment_matrix(matrix_config)
    _write_provenance(Path(args.out), "experiment", config_snapshot(config), inputs)
    print(f"wrote {Path(args.out) / 'report.csv'}")
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "stats": _cmd_stats,
    "adapt": _cmd_adapt,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "experiment": _cmd_experiment,
}


def dispatch(argv) -> int:
    _apply_thread_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from .errors import FormatError, UndefinedMetricError, ValidationError, VadlabError

    try:
        return _HANDLERS[args.command](args)
    except (ValidationError, FormatError, UndefinedMetricError) as exc:
        print(f"error (validation): {exc}", file=sys.stderr)
        return 3
    except VadlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
