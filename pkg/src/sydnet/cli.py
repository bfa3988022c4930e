"""Command-line entry point: ``sydnet <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort
(non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import GeometryMismatch
from .augment import IngestionError, augment_eval
from .backbone import BackboneShapeError, FeatureFormatError, FeatureWriter, ReferenceCNN
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, describe_keys, load_config
from .data import DataError, ImageCache, SynthSpec, generate_synthetic, scan_dataset
from .gradcheck import DEFAULT_TOLERANCE, check_gradients, format_table
from .metrics import METRICS_HEADER, write_confusion_csv
from .patches import GeometryError, build_patch_set
from .trainer import (ABLATION_VARIANTS, NumericAbort, evaluate, make_sources, run_ablation, train,
                      load_model)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_ARTIFACTS = ("config.resolved", "metrics.csv", "log.txt", "confusion.csv", "ablation.csv", "checkpoints")

log = logging.getLogger("sydnet")


class UsageError(Exception):
    """Bad command-line usage that maps to the configuration exit code."""


# -- helpers ----------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "data", None):
        overrides.append(f"data.root={args.data}")
    return load_config(getattr(args, "config", None), overrides)


def _run_dir(args, cfg: RunConfig, prefix: str) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(os.environ.get("SYD_RUN_DIR", "runs"))
        path = root / f"{prefix}-{cfg.config_hash():016x}"
    if path.exists() and any(path.iterdir()):
        if not args.force:
            raise UsageError(f"run directory {path} is not empty; pass --force or choose a new directory")
        for name in RUN_ARTIFACTS:
            target = path / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _attach_log_file(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "log.txt", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logging.getLogger("sydnet").addHandler(handler)
    return handler


def _manifest(cfg: RunConfig):
    if cfg.train.mode == "frozen_features" or cfg.backbone.kind == "imported":
        return None
    if not cfg.data.root:
        raise DataError("no dataset given: pass --data or set data.root")
    manifest = scan_dataset(cfg.data.root, cfg.data.split_file or None)
    if cfg.data.expect_classes:
        manifest.check_class_count(cfg.data.expect_classes)
    return manifest


def _write_resolved(run_dir: Path, cfg: RunConfig) -> None:
    (run_dir / "config.resolved").write_text(cfg.to_ini(), encoding="utf-8")


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    run_dir = _run_dir(args, cfg, "train")
    _write_resolved(run_dir, cfg)
    handler = _attach_log_file(run_dir)
    try:
        log.info("config hash %016x", cfg.config_hash())
        result = train(cfg, manifest, run_dir, log.info)
        final = result.final_test
        if final is not None:
            log.info("final test top1=%.2f top5=%.2f; best top1=%.2f at epoch %d",
                     final.top1, final.top5, result.best_top1, result.best_epoch)
    finally:
        logging.getLogger("sydnet").removeHandler(handler)
        handler.close()
    print(run_dir)
    return EXIT_OK


def _find_config_for(checkpoint: Path) -> Optional[Path]:
    for parent in (checkpoint.parent, checkpoint.parent.parent):
        candidate = parent / "config.resolved"
        if candidate.exists():
            return candidate
    return None


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint {ckpt_path} not found")
    if not args.config:
        args.config = _find_config_for(ckpt_path)
        if args.config is None:
            raise UsageError(f"no --config given and no config.resolved next to {ckpt_path}")
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    train_src, test_src, geometry = make_sources(cfg, manifest)
    source = train_src if args.split == "train" else test_src
    if source is None:
        raise DataError(f"dataset has no {args.split!r} split")
    # Run-time overrides such as --data change the hash without changing the weights.
    model = load_model(ckpt_path, cfg, source.n_classes, geometry, check_hash=False)
    epoch = load_checkpoint(ckpt_path).epoch
    row, cm = evaluate(model, source, max(cfg.train.batch_size, 32), epoch, args.split)
    print(",".join(METRICS_HEADER))
    print(",".join(row.as_csv()))
    if args.confusion:
        write_confusion_csv(args.confusion, cm)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.describe_patches:
        return _describe(args.describe_patches, None)
    cfg = _resolve_config(args)
    manifest = _manifest(cfg)
    run_dir = _run_dir(args, cfg, "ablate")
    _write_resolved(run_dir, cfg)
    handler = _attach_log_file(run_dir)
    try:
        patch_sets = [p.strip() for p in args.patch_sets.split(",") if p.strip()]
        for name in patch_sets:
            build_patch_set(name, cfg.patches.grid or None)
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        out = Path(args.out) if args.out else run_dir / "ablation.csv"
        rows = run_ablation(cfg, manifest, patch_sets, variants, out, jobs=args.jobs)
        failed = [r for r in rows if r[3] != "ok"]
        log.info("%d variants, %d failed; table at %s", len(rows), len(failed), out)
    finally:
        logging.getLogger("sydnet").removeHandler(handler)
        handler.close()
    print(out)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(num_classes=args.classes, samples_per_class=args.per_class, image_size=args.size,
                     seed=args.seed if args.seed is not None else 0, test_fraction=args.test_fraction)
    out = generate_synthetic(spec, args.out)
    print(out)
    return EXIT_OK


def cmd_features(args) -> int:
    """Run the reference CNN (eval mode, centre crop) over a tree and write SYDF files."""
    cfg = _resolve_config(args)
    if cfg.backbone.kind != "reference_cnn":
        raise ConfigError("features export needs backbone.kind=reference_cnn")
    manifest = _manifest(cfg)
    dtype = np.float64 if cfg.train.precision == "float64" else np.float32
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 0xB0]))
    cnn = ReferenceCNN(rng, cfg.backbone.width_tuple(), dtype, cfg.attention.bn_momentum, cfg.attention.bn_eps)
    if args.checkpoint:
        tensors = load_checkpoint(args.checkpoint).tensors
        weights = {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
        if not weights:
            raise DataError(f"{args.checkpoint} holds no backbone weights")
        cnn.load_state_dict(weights)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = ImageCache(manifest, cfg.aug.source_size)
    for split in ("train", "test"):
        entries = manifest.split(split)
        if not entries:
            continue
        path = out_dir / f"{split}.sydf"
        with FeatureWriter(path) as writer:
            for start in range(0, len(entries), 32):
                chunk = [(cache.get(e), e.label) for e in entries[start : start + 32]]
                chunk = [(img, y) for img, y in chunk if img is not None]
                if not chunk:
                    continue
                x = np.stack([augment_eval(img, cfg.aug) for img, _ in chunk]).astype(dtype)
                feats = cnn(T.Tensor(x), training=False).data
                for f, (_, y) in zip(feats, chunk):
                    writer.write(f, y)
        print(path)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = check_gradients(seed=seed)
    print(format_table(results, args.tolerance))
    worst = max(results, key=lambda r: r.max_rel_error)
    if worst.max_rel_error >= args.tolerance:
        print(f"gradient check failed: {worst.group} ({worst.worst_param}[{worst.worst_index}]) "
              f"max relative error {worst.max_rel_error:.3e} >= tolerance {args.tolerance:.1e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all groups below {args.tolerance:.1e}")
    return EXIT_OK


def _describe(name: str, grid: Optional[int]) -> int:
    print(build_patch_set(name, grid).describe())
    return EXIT_OK


def cmd_describe_patches(args) -> int:
    return _describe(args.name, args.grid)


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (section.key = default):\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="sydnet", description="Patch-based attention classifier toolkit.",
                                     epilog=keys, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func, help_text: str, config: bool = True, run_dir: bool = False):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=keys, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
        if config:
            p.add_argument("--config", help="INI-style config file")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
            p.add_argument("--data", help="dataset root (overrides data.root)")
        if run_dir:
            p.add_argument("--run-dir", help="output directory (default: $SYD_RUN_DIR/<command>-<config hash>)")
            p.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
        return p

    command("train", cmd_train, "train a model and write a run directory", run_dir=True)

    p = command("eval", cmd_eval, "evaluate a checkpoint and print one metrics row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--confusion", help="write the confusion matrix CSV here")

    p = command("ablate", cmd_ablate, "train ablation variants and write one comparison table", run_dir=True)
    p.add_argument("--patch-sets", default="P12,P20,P30")
    p.add_argument("--variants", default="ca_only,sa_only,full",
                   help="comma-separated, from: " + ",".join(ABLATION_VARIANTS))
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", help="CSV path (default: <run dir>/ablation.csv)")
    p.add_argument("--describe-patches", metavar="NAME", help="print the rectangles of a patch set and exit")

    p = command("synth", cmd_synth, "render a synthetic shape dataset", config=False)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100, help="training images per class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = command("features", cmd_features, "export reference-CNN feature maps as SYDF files")
    p.add_argument("--checkpoint", help="load backbone weights from this checkpoint")
    p.add_argument("--out", required=True, help="output directory for train.sydf / test.sydf")

    p = command("grad-check", cmd_grad_check, "finite-difference check of every head parameter group", config=False)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    p = command("describe-patches", cmd_describe_patches, "print the rectangles of a patch set", config=False)
    p.add_argument("name")
    p.add_argument("--grid", type=int, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(stream)
        log.setLevel(logging.INFO)
        log.propagate = False
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, GeometryError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, IngestionError, FeatureFormatError, CheckpointError, GeometryMismatch,
            BackboneShapeError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
