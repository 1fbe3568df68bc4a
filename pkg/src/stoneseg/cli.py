"""Command-line entry point for the whole pipeline.

Subcommands: crop, rasterize, split, synth, train, grid, eval,
annotate-video, bench.  A JSON config file supplies "model", "train" and
"scene" sections; command-line flags override file values; unknown keys
are rejected.  Exit codes: 0 success, 1 usage error, 2 data error,
3 diverged training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import imgio
from .annotations import (
    AnnotationParseError,
    AnnotationSchemaError,
    DatasetIndex,
    parse_annotations,
    rasterize_polygons,
    split_dataset,
)
from .imaging import UncroppableFrameError, auto_crop
from .nnet.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .nnet.model import ModelConfig
from .synthdata import (
    SceneSpec,
    SceneSpecError,
    generate_dataset,
    normalize_challenges,
    save_dataset,
)
from .training import (
    ArrayDataset,
    DivergedRunError,
    GridSpec,
    TrainConfig,
    carve_val_split,
    evaluate_model,
    grid_search,
    train_model,
)
from . import videopipe

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

DATA_ERRORS = (
    OSError,
    json.JSONDecodeError,
    AnnotationParseError,
    AnnotationSchemaError,
    CheckpointError,
    SceneSpecError,
    videopipe.FrameFormatError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _section(config: dict, name: str, cls) -> dict:
    """Extract one config section, rejecting keys the dataclass lacks."""
    values = config.get(name, {})
    if not isinstance(values, dict):
        raise UsageError(f"config section '{name}' must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise UsageError(f"unknown keys in config section '{name}': {sorted(unknown)}")
    return dict(values)


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path) as f:
        config = json.load(f)
    known = {"model", "train", "scene"}
    unknown = set(config) - known
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected {sorted(known)}")
    return config


def _model_config(args, config) -> ModelConfig:
    values = _section(config, "model", ModelConfig)
    if not values:
        raise UsageError("a 'model' config section is required")
    try:
        return ModelConfig(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad model config: {e}")


def _train_config(args, config) -> TrainConfig:
    values = _section(config, "train", TrainConfig)
    overrides = {
        "learning_rate": args.lr,
        "batch_size": args.batch,
        "epochs": args.epochs,
        "seed": args.seed,
        "optimizer": args.optimizer,
        "validation_interval": getattr(args, "val_interval", None),
        "warm_start": getattr(args, "warm_start", None),
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad train config: {e}")


def _scene_spec(args, config) -> SceneSpec:
    values = _section(config, "scene", SceneSpec)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.size is not None:
        values["image_size"] = args.size
    if args.stones is not None:
        values["stone_count"] = _int_pair(args.stones, "--stones")
    if args.radius is not None:
        values["stone_radius"] = _float_pair(args.radius, "--radius")
    if args.challenges is not None:
        values["challenges"] = normalize_challenges(
            [c for c in args.challenges.split(",") if c])
    if "stone_count" in values:
        values["stone_count"] = tuple(values["stone_count"])
    if "stone_radius" in values:
        values["stone_radius"] = tuple(values["stone_radius"])
    if "challenges" in values and not isinstance(values["challenges"], frozenset):
        values["challenges"] = normalize_challenges(values["challenges"])
    try:
        return SceneSpec(**values)
    except SceneSpecError:
        raise
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad scene config: {e}")


def _int_pair(text, flag):
    try:
        lo, hi = (int(v) for v in text.split(","))
        return (lo, hi)
    except ValueError:
        raise UsageError(f"{flag} expects 'lo,hi'")


def _float_pair(text, flag):
    try:
        lo, hi = (float(v) for v in text.split(","))
        return (lo, hi)
    except ValueError:
        raise UsageError(f"{flag} expects 'lo,hi'")


def _load_dataset(path, val_fraction=None, val_seed=0) -> ArrayDataset:
    index = DatasetIndex.load(path)
    if val_fraction:
        index = carve_val_split(index, val_fraction, val_seed)
    return ArrayDataset.from_index(index, os.path.dirname(os.path.abspath(path)))


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _cmd_crop(args):
    names = sorted(n for n in os.listdir(args.in_dir) if n.lower().endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no PNG frames in {args.in_dir}")
    imgio.ensure_dir(args.out_dir)
    boxes = {}
    failed = 0
    for name in names:
        img = imgio.read_rgb(os.path.join(args.in_dir, name))
        try:
            crop, box = auto_crop(img)
        except UncroppableFrameError as e:
            print(f"{name}: {e}", file=sys.stderr)
            boxes[name] = None
            failed += 1
            continue
        imgio.write_image(os.path.join(args.out_dir, name), crop)
        boxes[name] = [box.x0, box.y0, box.w, box.h]
    _write_json(os.path.join(args.out_dir, "boxes.json"), boxes)
    return EXIT_DATA if failed == len(names) else EXIT_OK


def _cmd_rasterize(args):
    imgio.ensure_dir(args.out_dir)
    for path in args.annotations:
        with open(path) as f:
            docs = parse_annotations(f.read())
        for doc in docs:
            mask = rasterize_polygons(doc)
            stem = os.path.splitext(os.path.basename(doc.image_name))[0]
            imgio.write_mask(os.path.join(args.out_dir, stem + ".png"), mask)
    return EXIT_OK


def _cmd_split(args):
    index = DatasetIndex.load(args.data)
    counts = {}
    for e in index.entries:
        counts[e.video_id] = counts.get(e.video_id, 0) + 1
    videos = sorted(counts.items())
    new = split_dataset(videos, args.fraction, args.seed)
    if args.val_fraction:
        new = carve_val_split(new, args.val_fraction, args.seed)
    new.save(args.out)
    return EXIT_OK


def _cmd_synth(args):
    spec = _scene_spec(args, _load_config(args.config))
    frames, masks, index = generate_dataset(spec, args.videos, args.frames)
    save_dataset(frames, masks, index, args.out)
    return EXIT_OK


def _cmd_train(args):
    config = _load_config(args.config)
    mcfg = _model_config(args, config)
    tcfg = _train_config(args, config)
    data = _load_dataset(args.data, args.val_fraction, tcfg.seed)
    ckpt, records = train_model(mcfg, tcfg, data, log_path=args.log)
    if args.out:
        save_checkpoint(args.out, ckpt)
    n_train = sum(1 for r in records if r["split"] == "train")
    n_val = len(records) - n_train
    print(f"trained {n_train} steps ({n_val} validation passes)"
          + (f"; checkpoint -> {args.out}" if args.out else ""))
    return EXIT_OK


def _cmd_grid(args):
    config = _load_config(args.config)
    mcfg = _model_config(args, config)
    base = _train_config(args, config)
    grid = GridSpec(
        learning_rates=tuple(float(v) for v in args.lrs.split(",")),
        batch_sizes=tuple(int(v) for v in args.batches.split(",")),
        seeds_per_cell=args.seeds,
    )
    data = _load_dataset(args.data, args.val_fraction, base.seed)
    best, _records, cells = grid_search(mcfg, grid, data, base=base, log_path=args.log)
    _write_json(args.out, {"best": best.echo(), "cells": cells})
    return EXIT_OK


def _cmd_eval(args):
    ckpt = load_checkpoint(args.model)
    data = _load_dataset(args.data)
    report = evaluate_model(ckpt, data, split=args.split)
    _write_json(args.out, report)
    return EXIT_OK


def _load_gt_masks(path, n: int):
    masks = []
    for i in range(n):
        masks.append(imgio.read_mask(os.path.join(path, f"frame_{i:06d}.png")))
    return masks


def _cmd_annotate_video(args):
    ckpt = load_checkpoint(args.model)
    if os.path.isdir(args.in_path):
        src = videopipe.DirectorySource(args.in_path)
    else:
        src = videopipe.PipeSource(open(args.in_path, "rb"))
    if args.target_fps:
        src = videopipe.resample_frames(src, args.target_fps)
    gt = None
    if args.gt:
        n = len(src) if hasattr(src, "__len__") else None
        if n is None:
            src = videopipe.resample_frames(src, getattr(src, "fps_nominal", 20.0))
            n = len(src)
        gt = _load_gt_masks(args.gt, n)

    imgio.ensure_dir(args.out_dir)
    if args.pmap_dir:
        imgio.ensure_dir(args.pmap_dir)

    def on_panel(res):
        imgio.write_image(os.path.join(args.out_dir, f"frame_{res.index:06d}.png"), res.panel)
        if args.pmap_dir:
            videopipe.write_pmap(
                os.path.join(args.pmap_dir, f"frame_{res.index:06d}.pmap"), res.prob)
        if res.error:
            print(f"frame {res.index}: {res.error}", file=sys.stderr)

    _, report = videopipe.run_annotation(ckpt, src, gt=gt, pipelined=args.pipelined,
                                         on_panel=on_panel)
    _write_json(args.report, report)
    return EXIT_OK


def _cmd_bench(args):
    ckpt = load_checkpoint(args.model) if args.model else None
    report = videopipe.bench_throughput(ckpt, args.size, args.frames,
                                        pipelined=args.pipelined)
    _write_json(args.out, report)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="stoneseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("crop", help="auto-crop frames to their dominant contour")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_crop)

    p = sub.add_parser("rasterize", help="polygon annotation JSON -> mask PNGs")
    p.add_argument("--annotations", nargs="+", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_rasterize)

    p = sub.add_parser("split", help="assign videos to train/test (and optional val)")
    p.add_argument("--data", required=True, help="index.json")
    p.add_argument("--fraction", type=float, default=0.15)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--stones", default=None, help="lo,hi")
    p.add_argument("--radius", default=None, help="lo,hi pixels")
    p.add_argument("--challenges", default=None,
                   help="comma list: blur,debris,foreign,saline")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_synth)

    def train_flags(p):
        p.add_argument("--config", default=None)
        p.add_argument("--data", required=True, help="index.json")
        p.add_argument("--log", default=None, help="JSONL experiment log")
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
        p.add_argument("--val-fraction", type=float, default=None,
                       help="carve validation videos out of the train split")

    p = sub.add_parser("train", help="train one model")
    train_flags(p)
    p.add_argument("--val-interval", type=int, default=None)
    p.add_argument("--warm-start", default=None, help="checkpoint path")
    p.add_argument("--out", default=None, help="checkpoint path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("grid", help="grid-search learning rate x batch size")
    train_flags(p)
    p.add_argument("--lrs", required=True, help="comma list")
    p.add_argument("--batches", required=True, help="comma list")
    p.add_argument("--seeds", type=int, default=1, help="seeds per cell")
    p.add_argument("--out", default=None, help="winner JSON")
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("eval", help="hold-out metric report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("annotate-video", help="stream panels for a video")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_path", required=True,
                   help="frame directory or raw pipe file")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--gt", default=None, help="directory of mask PNGs")
    p.add_argument("--pipelined", action="store_true")
    p.add_argument("--target-fps", type=float, default=None)
    p.add_argument("--report", default=None, help="fps report JSON path")
    p.add_argument("--pmap-dir", default=None, help="raw probability map exports")
    p.set_defaults(func=_cmd_annotate_video)

    p = sub.add_parser("bench", help="throughput benchmark")
    p.add_argument("--model", default=None, help="checkpoint; omit for identity model")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--pipelined", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bench)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"stoneseg: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedRunError as e:
        print(f"stoneseg: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except DATA_ERRORS as e:
        print(f"stoneseg: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"stoneseg: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
