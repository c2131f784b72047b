"""Command-line interface.

One batch-oriented command per workflow:

    train       fit a model variant on a dataset directory
    eval        top-1 accuracy of a checkpoint on a dataset split
    crop-tiny   cut a dataset into filtered non-overlapping tiles
    stats       per-class (and optional per-category) count report
    inspect     trace attention observables of a checkpoint, export
                tensors/summary/heatmaps
    gradcheck   finite-difference verification of ops and model variants
    params      parameter accounting for a model variant

Exit codes: 0 success, 1 check failure (gradcheck violations, non-finite
gradients), 2 usage/configuration problems.  Config precedence for train is
flags > --config file > preset defaults; the resolved configuration is echoed
to ``config.json`` next to the artifacts of commands that write output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ImageDataset,
    dataset_stats_rows,
    generate_tiny,
    ingest,
    load_category_map,
    save_manifest,
    write_stats_csv,
)
from .errors import ConfigurationError, FpnkitError, ShapeError, TrainingError
from .gradcheck import THRESHOLD, run_gradcheck
from .introspect import activation_summary, export_heatmaps, export_trace, trace_forward, write_summary_csv
from .model import (
    MODEL_NAMES,
    build_named_model,
    count_parameters,
    load_checkpoint,
    load_checkpoint_meta,
)
from .tensor import Tensor
from .train import PRESET_NAMES, evaluate, preset, train

DEPTHS = (18, 34, 20, 56)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, choices=MODEL_NAMES)
    parser.add_argument("--depth", required=True, type=int, choices=DEPTHS)
    parser.add_argument("--cd", type=int, default=None, help="lateral channel width (default 256/64 by family)")
    parser.add_argument("--reduction", type=int, default=16, help="excitation bottleneck divisor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpnkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fpnkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model variant")
    _add_model_flags(p)
    p.add_argument("--preset", required=True, help=f"one of {PRESET_NAMES}")
    p.add_argument("--data", required=True, help="dataset root (class directories of .tnsr images)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--upsample", choices=("bilinear", "nearest", "deconv"), default="bilinear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file overriding preset fields")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--threads", type=int, default=1,
                   help="reserved; kernels run single-threaded with deterministic reductions")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--seed", type=int, default=0, help="split seed used at ingest")
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("crop-tiny", help="tile a dataset into filtered crops")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--tile", type=int, default=32)
    p.add_argument("--vmin", type=float, default=1e-3, help="minimum luminance variance per tile")
    p.add_argument("--delta", type=float, default=0.02, help="border-mean proximity that drops a tile")
    p.add_argument("--border", type=int, default=1, help="border frame width for the background proxy")

    p = sub.add_parser("stats", help="per-class dataset report")
    p.add_argument("--data", required=True)
    p.add_argument("--categories", default=None, help="CSV mapping class names to categories")
    p.add_argument("--out", default=None, help="write the CSV here instead of stdout")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="export attention traces of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", default=None, help=f"'ops', 'all' or one of {MODEL_NAMES}")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("params", help="parameter accounting")
    _add_model_flags(p)
    p.add_argument("--classes", type=int, default=98)

    return parser


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fp:
        json.dump(payload, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _regime_for_checkpoint(model, meta):
    from .data import AugmentationRegime

    size = model.spec.backbone.input_size
    regime = AugmentationRegime.herb224("none") if size == 224 else AugmentationRegime.tiny32("none")
    if "meta/norm_mean" in meta:
        regime.mean = meta["meta/norm_mean"]
        regime.std = meta["meta/norm_std"]
    return regime


def _cmd_train(args) -> int:
    if args.threads < 1:
        raise ConfigurationError(f"--threads must be positive, got {args.threads}")
    cfg = preset(args.preset)
    if args.config:
        with open(args.config) as fp:
            overrides = json.load(fp)
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ConfigurationError(f"unknown config field {key!r}")
            setattr(cfg, key, tuple(map(tuple, value)) if key == "milestones" else value)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("dtype", "dtype")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, key, value)
    cfg.seed = args.seed
    # shortening a run drops the schedule steps it can no longer reach
    cfg.milestones = tuple((e, d) for e, d in cfg.milestones if e < cfg.epochs)

    upsampling = {"deconv": "deconvolution"}.get(args.upsample, args.upsample)
    manifest = ingest(args.data, seed=args.seed)
    model = build_named_model(
        args.model,
        args.depth,
        num_classes=manifest.num_classes,
        upsampling=upsampling,
        lateral_channels=args.cd,
        reduction=args.reduction,
        seed=args.seed,
        dtype=np.dtype(cfg.dtype),
    )
    dataset = ImageDataset(manifest, cfg.regime)
    dataset.compute_normalization()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out_dir / "manifest.csv")
    echo = {
        "command": "train",
        "model": args.model,
        "depth": args.depth,
        "upsample": upsampling,
        "cd": model.spec.pyramid.lateral_channels,
        "reduction": args.reduction,
        "data": str(args.data),
        "threads": args.threads,
        "num_classes": manifest.num_classes,
        "train_config": _jsonable(cfg),
    }
    _echo_config(out_dir, echo)

    record = train(model, dataset, cfg, out_dir=out_dir, log=lambda line: print(line, flush=True))
    final = record.rows[-1]
    print(f"done: train_acc {final.train_acc:.4f} val_acc {final.val_acc:.4f} -> {record.checkpoint_path}")
    return 0


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    meta = load_checkpoint_meta(args.ckpt)
    manifest = ingest(args.data, seed=args.seed)
    if manifest.num_classes != model.spec.num_classes:
        raise ConfigurationError(
            f"dataset has {manifest.num_classes} classes, checkpoint expects {model.spec.num_classes}"
        )
    dataset = ImageDataset(manifest, _regime_for_checkpoint(model, meta))
    accuracy = evaluate(model, dataset, split=args.split, batch_size=args.batch_size)
    print(f"{args.split}_acc {accuracy:.6f}")
    return 0


def _cmd_crop_tiny(args) -> int:
    report = generate_tiny(args.src, args.dst, tile=args.tile, v_min=args.vmin,
                           delta=args.delta, border=args.border)
    _echo_config(Path(args.dst), {
        "command": "crop-tiny", "src": str(args.src), "tile": args.tile,
        "vmin": args.vmin, "delta": args.delta, "border": args.border,
    })
    for name in sorted(report.per_class_raw):
        print(f"{name}: raw {report.per_class_raw[name]} kept {report.per_class_kept[name]}")
    print(f"total: raw {report.raw_tiles} kept {report.kept_tiles} "
          f"skipped_images {report.skipped_images}")
    return 0


def _cmd_stats(args) -> int:
    manifest = ingest(args.data, seed=args.seed)
    mapping = load_category_map(args.categories) if args.categories else None
    rows = dataset_stats_rows(manifest, mapping)
    if args.out:
        with open(args.out, "w", newline="") as fp:
            write_stats_csv(rows, fp)
        print(f"wrote {args.out}")
    else:
        write_stats_csv(rows, sys.stdout)
    return 0


def _cmd_inspect(args) -> int:
    if args.images < 1:
        raise ConfigurationError(f"--images must be positive, got {args.images}")
    model = load_checkpoint(args.ckpt)
    meta = load_checkpoint_meta(args.ckpt)
    manifest = ingest(args.data, seed=args.seed)
    dataset = ImageDataset(manifest, _regime_for_checkpoint(model, meta))
    entries = dataset.val_entries if args.split == "val" else dataset.train_entries
    if not entries:
        raise ConfigurationError(f"split {args.split!r} is empty")
    entries = entries[: args.images]
    out_dir = Path(args.out)
    model.eval()
    traces = []
    for i, entry in enumerate(entries):
        img, _ = dataset.example(entry, train=False)
        dtype = next(iter(model.parameters())).dtype
        _, trace = trace_forward(model, Tensor(img[None].astype(dtype)), input_id=f"input{i}")
        export_trace(trace, out_dir)
        export_heatmaps(trace, out_dir)
        traces.append(trace)
    rows = activation_summary(traces)
    write_summary_csv(rows, out_dir / "summary.csv")
    _echo_config(out_dir, {
        "command": "inspect", "ckpt": str(args.ckpt), "data": str(args.data),
        "images": args.images, "split": args.split, "seed": args.seed,
    })
    print(f"exported {len(traces)} traces to {out_dir}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.module, seed=args.seed)
    failures = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max relative error {r.max_error:.3e}")
    if failures:
        worst = max(failures, key=lambda r: r.max_error)
        print(
            f"worst offender: {worst.name} ({worst.detail or 'n/a'}) "
            f"error {worst.max_error:.3e} >= {THRESHOLD:.0e}",
            file=sys.stderr,
        )
        return 1
    return 0


def _cmd_params(args) -> int:
    model = build_named_model(
        args.model,
        args.depth,
        num_classes=args.classes,
        lateral_channels=args.cd,
        reduction=args.reduction,
        seed=0,
        dtype=np.float32,
    )
    total = count_parameters(model)
    backbone = count_parameters(model.backbone)
    pyramid = count_parameters(model.pyramid)
    head = count_parameters(model.fc)
    print(f"model {args.model} depth {args.depth} classes {args.classes}")
    print(f"backbone {backbone} ({backbone / 1e6:.2f}M)")
    print(f"pyramid  {pyramid} ({pyramid / 1e6:.2f}M)")
    print(f"head     {head} ({head / 1e6:.2f}M)")
    print(f"total    {total} ({total / 1e6:.2f}M)")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "crop-tiny": _cmd_crop_tiny,
    "stats": _cmd_stats,
    "inspect": _cmd_inspect,
    "gradcheck": _cmd_gradcheck,
    "params": _cmd_params,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TrainingError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConfigurationError, ShapeError, FpnkitError, FileNotFoundError, NotADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
