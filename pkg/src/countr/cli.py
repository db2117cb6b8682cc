"""Command line entry point: ``countr <command> [options]``.

A data directory holds ``images/``, ``annotations.json`` and optionally
``splits.json`` and ``classes.txt``. Every command writes the resolved run
configuration to ``<out-dir>/run_config.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import (AnnotationError, ImageSample, read_image, resize_to_height, save_image,
                   write_annotations, load_annotations)
from .evaluation import evaluate_split, read_exclude_list
from .inference import InferenceConfig, predict_count
from .model import CheckpointError, load_model
from .mosaic import MosaicConfig, synthesize
from .overlay import render_overlay
from .toy import make_toy_data
from .training import finetune, pretrain
from .validation import parse_boxes

logger = logging.getLogger("countr")


class CLIError(Exception):
    pass


def load_data_dir(data_dir, split: str | None = None, lazy: bool = False):
    root = Path(data_dir)
    ann = root / "annotations.json"
    if not ann.is_file():
        raise CLIError(f"{ann} not found")
    split_file = root / "splits.json"
    classes = root / "classes.txt"
    samples = load_annotations(ann, root / "images",
                               split_file=split_file if split_file.is_file() else None,
                               split=split, classes_file=classes if classes.is_file() else None,
                               lazy=lazy)
    for err in samples.errors:
        logger.warning("skipped %s: %s", err.image_id, err.message)
    return samples


def resolve_config(args) -> RunConfig:
    base = RunConfig.toy() if getattr(args, "toy", False) else RunConfig()
    cfg = RunConfig.load(args.config, base) if args.config else base
    cfg.command = args.command
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record(cfg: RunConfig, out: Path, **paths) -> None:
    cfg.paths.update({k: str(v) for k, v in paths.items() if v is not None})
    cfg.dump(out / "run_config.json")


def _inference_config(cfg: RunConfig, explicit: bool, payload: dict) -> InferenceConfig:
    """Inference geometry from the config file if given, else from the checkpoint."""
    if explicit or "inference_config" not in payload:
        return cfg.inference
    return InferenceConfig(**payload["inference_config"])


def cmd_make_toy_data(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    samples = make_toy_data(args.n, (args.min_objects, args.max_objects), cfg.seed, out,
                            size=(args.height, args.width))
    _record(cfg, out, out_dir=out)
    print(json.dumps({"n": len(samples), "out_dir": str(out)}))
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    mosaic = cfg.mosaic
    changes = {"rng_seed": cfg.seed}
    if args.threshold is not None:
        changes["type_threshold"] = args.threshold
    if args.output_size is not None:
        changes["output_size"] = args.output_size
    cfg.mosaic = mosaic = MosaicConfig(**{**vars(mosaic), **changes})
    sources = load_data_dir(args.data_dir, split=args.split)
    if not sources:
        raise CLIError(f"no source images in {args.data_dir}")
    out = _out_dir(args)
    (out / "images").mkdir(exist_ok=True)
    results, errors = synthesize(sources, args.count, mosaic, args.type)
    written, meta = [], {}
    for i, r in enumerate(results):
        name = f"mosaic_{i:05d}.png"
        save_image(r.sample.pixels, out / "images" / name)
        written.append(r.sample.replace(image=read_image(out / "images" / name), image_id=name,
                                        split="train"))
        meta[name] = {"type": r.mosaic_type, "sources": list(r.source_ids),
                      "usable_shots": sorted(r.usable_shots)}
    write_annotations(written, out / "annotations.json", out / "splits.json")
    report = {"requested": args.count, "written": len(written), "mosaics": meta,
              "errors": [{"task": i, "reason": msg} for i, msg in errors]}
    (out / "synth_report.json").write_text(json.dumps(report, indent=1))
    _record(cfg, out, data_dir=args.data_dir, out_dir=out)
    print(json.dumps({"written": len(written), "failed": len(errors)}))
    return 0


def _train_samples(args):
    samples = load_data_dir(args.data_dir, split="train")
    if not samples:
        raise CLIError(f"no training images in {args.data_dir}")
    return samples


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    ckpt = Path(args.out) if args.out else out / "mae.pt"
    samples = _train_samples(args)
    _record(cfg, out, data_dir=args.data_dir, checkpoint=ckpt, resume=args.resume)
    with open(out / "pretrain_log.jsonl", "a") as log:
        pretrain(samples, cfg.model, cfg.pretrain, steps=args.steps, seed=cfg.seed, log=log,
                 resume=args.resume, checkpoint=str(ckpt))
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    ckpt = Path(args.out) if args.out else out / "countr.pt"
    samples = _train_samples(args)
    _record(cfg, out, data_dir=args.data_dir, checkpoint=ckpt, init=args.init, resume=args.resume)
    mosaic = None if args.no_mosaic else cfg.mosaic
    with open(out / "finetune_log.jsonl", "a") as log:
        finetune(samples, cfg.model, cfg.train, steps=args.steps, seed=cfg.seed,
                 init_checkpoint=args.init, mosaic_cfg=mosaic, log=log,
                 resume=args.resume, checkpoint=str(ckpt),
                 checkpoint_extra={"inference_config": dataclasses.asdict(cfg.inference)})
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    model, payload = load_model(args.checkpoint)
    icfg = _inference_config(cfg, bool(args.config), payload)
    image = read_image(args.image)
    boxes = parse_boxes(args.boxes)
    shots = len(boxes) if args.shots is None else args.shots
    if shots > len(boxes):
        raise CLIError(f"--shots {shots} needs at least {shots} boxes, got {len(boxes)}")
    sample = ImageSample(image=image, dots=np.zeros((0, 2)),
                         boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
                         image_id=Path(args.image).name)
    pred = predict_count(model, sample, shots, icfg)
    result = pred.to_dict()
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=1))
    if args.overlay:
        shown = resize_to_height(sample, icfg.resize_height).pixels
        render_overlay(shown, pred.density, args.overlay)
    _record(cfg, _out_dir(args), checkpoint=args.checkpoint, image=args.image)
    print(json.dumps(result))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, payload = load_model(args.checkpoint)
    icfg = _inference_config(cfg, bool(args.config), payload)
    samples = load_data_dir(args.data_dir, split=args.split)
    exclude = read_exclude_list(args.exclude) if args.exclude else []
    result = evaluate_split(model, samples, args.shots, icfg, exclude)
    out = _out_dir(args)
    report = Path(args.report) if args.report else out / f"eval_{args.split}_{args.shots}shot.json"
    result.write_json(report)
    if args.csv:
        result.write_csv(args.csv)
    _record(cfg, out, checkpoint=args.checkpoint, data_dir=args.data_dir, report=report)
    print(json.dumps({"n_images": result.n_images, "mae": result.mae, "rmse": result.rmse,
                      "shots": result.shots, "excluded": len(result.excluded_ids)}))
    return 0


COMMANDS = {
    "make-toy-data": cmd_make_toy_data,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def _global_flags(parser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=d(None))
    parser.add_argument("--out-dir", default=d("."))
    parser.add_argument("--log-level", default=d("INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="countr", description="Class-agnostic object counting.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    p = add("make-toy-data", "write a synthetic toy dataset")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--min-objects", type=int, default=7)
    p.add_argument("--max-objects", type=int, default=60)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=160)

    p = add("synth", "generate mosaic training images")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--type", choices=["a", "b", "auto"], default="auto")
    p.add_argument("--threshold", type=int)
    p.add_argument("--output-size", type=int)
    p.add_argument("--toy", action="store_true", help="start from the toy configuration")

    for name, help in (("pretrain", "masked-autoencoder pre-training"),
                       ("finetune", "supervised counting training")):
        p = add(name, help)
        p.add_argument("--data-dir", required=True)
        p.add_argument("--out", help="checkpoint path")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--steps", type=int, help="optimizer steps (default: from epochs)")
        p.add_argument("--toy", action="store_true", help="use the toy model configuration")
        if name == "finetune":
            p.add_argument("--init", help="MAE checkpoint for the image encoder")
            p.add_argument("--no-mosaic", action="store_true")

    p = add("infer", "count objects in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--boxes", default="", help='exemplars as "y1,x1,y2,x2;..."')
    p.add_argument("--shots", type=int, choices=[0, 1, 2, 3])
    p.add_argument("--overlay", help="write a density heat-map PNG here")
    p.add_argument("--json", help="write the prediction JSON here")

    p = add("eval", "evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["val", "test"], default="val")
    p.add_argument("--shots", type=int, choices=[0, 1, 2, 3], default=3)
    p.add_argument("--exclude", help="file of image ids to leave out")
    p.add_argument("--report", help="EvalResult JSON path")
    p.add_argument("--csv", help="per-image CSV path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CLIError, ConfigError, AnnotationError, CheckpointError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
