"""Command-line entry point: ``python -m dualkd <command> ...``.

Exit status: 0 success, 1 usage or configuration error, 2 data or format
error, 3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (
    ArchitectureError,
    ConfigurationError,
    DimensionError,
    DivergenceError,
    FormatError,
    InputError,
    UsageError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory written by synth-data")
    p.add_argument("--val", help="validation dataset directory")
    p.add_argument("--out", required=True, help="run directory for metrics and checkpoints")
    p.add_argument("--config", help="key=value run-config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ramp-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ema-alpha", type=float)
    p.add_argument("--batch-composition", help="strong,weak,unlabeled clips per batch")
    p.add_argument("--student", help="architecture preset (SE-CRNN-8, SE-CRNN-16, SE-CRNN-tiny)")
    p.add_argument("--augmentation", choices=("none", "mixup", "time_mask", "both"))
    p.add_argument("--embedding-seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualkd", description="Dual knowledge distillation for sound event detection.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--strong", type=int, default=20)
    p.add_argument("--weak", type=int, default=20)
    p.add_argument("--unlabeled", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--snr", type=float, default=6.0)
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--prefix", default="clip")

    p = sub.add_parser("pretrain-teacher", help="supervised training on the strong split")
    _add_train_flags(p)

    p = sub.add_parser("train", help="train a student in any mode")
    _add_train_flags(p)
    p.add_argument("--mode", choices=("supervised_only", "mean_teacher", "CDTD", "TAKD", "TAKD+EEFD"))
    p.add_argument("--coupling", choices=("detached", "coupled"))
    p.add_argument("--teacher", help="checkpoint holding the pre-trained teacher")
    p.add_argument("--teacher-role", default="student")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--role", default="student")
    p.add_argument("--out", help="write the JSON report here instead of standard output")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--median", type=int, default=7)
    p.add_argument("--segment", type=float, default=1.0)
    p.add_argument("--collar", type=float, default=0.2)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--no-model", action="store_true", help="skip the full-model check")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect-checkpoint", help="list stored tensors")
    p.add_argument("--checkpoint", required=True)
    return parser


def _train_overrides(args) -> dict:
    names = {
        "seed": "seed", "epochs": "epochs", "ramp_epochs": "ramp_epochs", "lr": "lr",
        "ema_alpha": "ema_alpha", "batch_composition": "batch_composition", "student": "student",
        "augmentation": "augmentation", "mode": "mode", "coupling": "ema_gradient_coupling",
    }
    out = {}
    for flag, key in names.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = str(v)
    if "batch_composition" in out:
        out["batch_size"] = str(sum(int(c) for c in out["batch_composition"].split(",")))
    return out


def _load_store(path, provider_seed=None):
    from .synth import ClipStore, Manifest, MockEmbeddingProvider

    manifest = Manifest.load(path)
    provider = None
    if provider_seed is not None:
        provider = MockEmbeddingProvider(manifest.feature_config.n_mels, seed=provider_seed)
    return ClipStore(manifest, provider, cache_dir=Path(path) / "embeddings" if provider else None)


def _run_training(args, supervised: bool, out) -> int:
    from .checkpoint import load_checkpoint
    from .training import load_run_config, parse_key_values, train_loop

    overrides = _train_overrides(args)
    if supervised:
        overrides["mode"] = "supervised_only"
    items = parse_key_values(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    items.update(overrides)
    if supervised and "batch_composition" not in overrides:
        size = int(items.get("batch_size", 48))
        items["batch_composition"] = f"{size},0,0"
        items["batch_size"] = str(size)
    if supervised and "ramp_epochs" not in items:
        # mu multiplies nothing without a teacher; keep the ramp inside the run
        items["ramp_epochs"] = str(min(50, int(items.get("epochs", 200))))
    cfg = load_run_config(None, items)

    teacher = None
    if cfg.uses_teacher:
        if not getattr(args, "teacher", None):
            raise UsageError(f"--teacher is required for mode {cfg.mode}")
        models, _ = load_checkpoint(args.teacher)
        if args.teacher_role not in models:
            raise ArchitectureError(f"teacher checkpoint has no role {args.teacher_role!r}")
        teacher = models[args.teacher_role]

    train = _load_store(args.data, args.embedding_seed if cfg.uses_embeddings else None)
    val = _load_store(args.val) if args.val else None
    log = None if args.quiet else (lambda line: print(line, file=out, flush=True))
    art = train_loop(cfg, train, args.out, val_store=val, teacher=teacher, log=log)
    summary = {
        "metrics": str(art.metrics_path),
        "best_checkpoint": str(art.best_checkpoint),
        "final_checkpoint": str(art.final_checkpoint),
        "best_epoch": art.best_epoch,
    }
    if teacher is not None:
        summary["teacher_unchanged"] = art.teacher_hash_start == art.teacher_hash_end
    print(json.dumps(summary), file=out)
    return EXIT_OK


def _cmd_synth(args, out) -> int:
    from .features import FeatureConfig
    from .synth import generate_dataset

    m = generate_dataset(
        args.out, args.classes, {"strong": args.strong, "weak": args.weak, "unlabeled": args.unlabeled},
        seed=args.seed, duration=args.duration, snr_db=args.snr,
        feature_config=FeatureConfig(n_mels=args.n_mels), prefix=args.prefix,
    )
    print(json.dumps({"out": str(args.out), "records": len(m.records), **m.counts()}), file=out)
    return EXIT_OK


def _cmd_eval(args, out) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import evaluate_model

    models, _ = load_checkpoint(args.checkpoint)
    if args.role not in models:
        raise ArchitectureError(f"checkpoint has no role {args.role!r} (has {', '.join(models)})")
    store = _load_store(args.data)
    report = evaluate_model(models[args.role], store, args.threshold, args.median, args.segment, args.collar)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text, file=out)
    return EXIT_OK


def _cmd_gradcheck(args, out) -> int:
    from .gradsuite import format_table, run_suite

    rows = run_suite(include_model=not args.no_model, seed=args.seed)
    print(format_table(rows), file=out)
    failed = [name for name, err, limit, _ in rows if not err < limit]
    if failed:
        print(f"failed: {', '.join(failed)}", file=out)
        return EXIT_USAGE
    return EXIT_OK


def _cmd_inspect(args, out) -> int:
    from .checkpoint import read_records

    config, records = read_records(args.checkpoint)
    for k, v in config.items():
        print(f"# {k}={v}", file=out)
    for name, arr in records.items():
        print(f"{name}\t{'x'.join(str(d) for d in arr.shape) or 'scalar'}", file=out)
    return EXIT_OK


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        handler = {
            "synth-data": _cmd_synth,
            "pretrain-teacher": lambda a, o: _run_training(a, True, o),
            "train": lambda a, o: _run_training(a, False, o),
            "eval": _cmd_eval,
            "gradcheck": _cmd_gradcheck,
            "inspect-checkpoint": _cmd_inspect,
        }[args.command]
        return handler(args, out)
    except (UsageError, ConfigurationError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InputError, ArchitectureError, DimensionError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
