"""Command-line entry point: ``fundus2video {synth-data,mask,train,generate,evaluate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    InsufficientFramesError,
    MalformedSampleError,
    TrainingDivergenceError,
)

logger = logging.getLogger("fundus2video")

USER_ERRORS = (ConfigurationError, ContractError, InsufficientFramesError, MalformedSampleError,
               CheckpointError, FileNotFoundError, FileExistsError)


class UsageError(Exception):
    def __init__(self, message, usage):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _global_options(suppress):
    p = argparse.ArgumentParser(add_help=False)
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, **({"default": None} if not suppress else kw), help="random seed")
    p.add_argument("--log-level", **({"default": "INFO"} if not suppress else kw),
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=int, **({"default": 1} if not suppress else kw),
                   help="torch intra-op threads; 1 (default) gives byte-reproducible runs")
    return p


def build_parser():
    parser = _Parser(prog="fundus2video", description=__doc__.splitlines()[0], parents=[_global_options(False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_global_options(True)]

    p = sub.add_parser("synth-data", parents=common, help="write a synthetic paired CF/FFA dataset")
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--frames", type=int, default=12, help="FFA frames per patient, spread over the three phases")
    p.add_argument("--size", type=int, default=64, help="image side length in pixels")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mask", parents=common, help="knowledge mask from a first and a last FFA frame")
    p.add_argument("--first", required=True)
    p.add_argument("--last", required=True)
    p.add_argument("--threshold", type=float, default=45.0, help="grey-level threshold on the 0-255 scale")
    p.add_argument("--morphology", action="store_true", help="3x3 open/close clean-up")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=common, help="train the generator and discriminators")
    p.add_argument("--config", help="JSON or TOML file with TrainConfig fields")
    p.add_argument("--data-root", required=True)
    p.add_argument("--out-dir", default="runs/train")
    p.add_argument("--resume", help="checkpoint to resume from")
    for flag, typ in (("--epochs", int), ("--image-size", int), ("--lr", float), ("--lr-decay", float),
                      ("--lr-step-iters", int), ("--frames-per-sequence", int), ("--teacher-forcing-prob", float),
                      ("--ngf", int), ("--n-blocks", int), ("--ndf", int), ("--n-patches", int),
                      ("--proj-dim", int), ("--max-steps", int), ("--sample-every", int), ("--save-every", int),
                      ("--lambda-up", float), ("--lambda-sp", float), ("--lambda-att", float),
                      ("--lambda-gan", float), ("--mask-threshold", float)):
        p.add_argument(flag, type=typ)
    p.add_argument("--nce-mask-mode", choices=["sample", "pixel"])
    p.add_argument("--no-knowledge-mask", action="store_true", help="ablation: disable all mask guidance")
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("generate", parents=common, help="generate an FFA video from one CF image")
    p.add_argument("--cf", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--out", required=True)
    p.add_argument("--no-smooth", action="store_true")
    p.add_argument("--smoothing", choices=["centered", "trailing"], default="centered")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", parents=common, help="score generated videos on a dataset split")
    p.add_argument("--data-root", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--extractor", default="fallback", help="'fallback' or a plugin 'module:attr' / 'file.py:attr'")
    p.add_argument("--out", default="report.json")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--no-smooth", action="store_true")
    return parser


def _print_config(payload):
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def load_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib

        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def resolve_train_config(args):
    from .trainer import TrainConfig

    data = load_config_file(args.config) if args.config else {}
    weights = dict(data.pop("weights", {}) or {})
    overrides = {
        "epochs": args.epochs, "image_size": args.image_size, "lr": args.lr, "lr_decay": args.lr_decay,
        "lr_step_iters": args.lr_step_iters, "frames_per_sequence": args.frames_per_sequence,
        "teacher_forcing_prob": args.teacher_forcing_prob, "ngf": args.ngf, "n_blocks": args.n_blocks,
        "ndf": args.ndf, "n_patches": args.n_patches, "proj_dim": args.proj_dim, "max_steps": args.max_steps,
        "sample_every": args.sample_every, "save_every": args.save_every, "nce_mask_mode": args.nce_mask_mode, "seed": args.seed,
        "mask_threshold": args.mask_threshold,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_knowledge_mask:
        data["use_knowledge_mask"] = False
    if args.no_augment:
        data["augment"] = False
    for name in ("up", "sp", "att", "gan"):
        value = getattr(args, f"lambda_{name}")
        if value is not None:
            weights[f"lambda_{name}"] = value
    data["weights"] = weights
    return TrainConfig.from_dict(data)


def _cmd_synth(args):
    from .data import frames_per_phase_for_total, synthesize_dataset

    seed = args.seed or 0
    _print_config({"command": "synth-data", "patients": args.patients, "frames": args.frames,
                   "size": args.size, "noise": args.noise, "out": args.out, "seed": seed})
    if args.patients < 1:
        raise ConfigurationError("--patients must be >= 1")
    if args.size < 8 or args.size % 8:
        raise ConfigurationError("--size must be a positive multiple of 8")
    manifest = synthesize_dataset(args.out, args.patients, frames_per_phase_for_total(args.frames),
                                  image_size=args.size, seed=seed, noise_level=args.noise)
    logger.info("wrote %d patients to %s (splits: %s)", args.patients, args.out,
                {k: len(v) for k, v in manifest["splits"].items()})


def _read_gray(path):
    try:
        return np.asarray(Image.open(path).convert("L"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read image {path}: {exc}") from exc


def _cmd_mask(args):
    from .mask import compute_mask, mask_coverage

    _print_config({"command": "mask", "first": args.first, "last": args.last, "threshold": args.threshold,
                   "morphology": args.morphology, "out": args.out})
    first, last = _read_gray(args.first), _read_gray(args.last)
    mask = compute_mask(first, last, args.threshold, morphology=args.morphology)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.values * 255).astype(np.uint8), mode="L").save(out)
    print(f"coverage {mask_coverage(mask):.6f}")


def _cmd_train(args):
    from .data import load_dataset
    from .trainer import fit

    config = resolve_train_config(args)
    _print_config({"command": "train", "data_root": args.data_root, "out_dir": args.out_dir,
                   "resume": args.resume, "config": asdict(config)})
    samples = load_dataset(args.data_root, "train", target_size=config.image_size)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(asdict(config), indent=2, sort_keys=True))
    final = fit(samples, config, out_dir, resume=args.resume)
    print(f"checkpoint {final}")


def _cmd_generate(args):
    from .inference import generate_video

    smoothing = "none" if args.no_smooth else args.smoothing
    seed = args.seed or 0
    _print_config({"command": "generate", "cf": args.cf, "checkpoint": args.checkpoint, "frames": args.frames,
                   "out": args.out, "smoothing": smoothing, "force": args.force, "seed": seed})
    if args.frames < 1:
        raise ConfigurationError("--frames must be >= 1")
    video = generate_video(args.cf, args.checkpoint, args.frames, args.out, smoothing=smoothing,
                           force=args.force, seed=seed)
    print(f"wrote {len(video.frames)} frames to {args.out}")


def _cmd_evaluate(args):
    from .metrics import evaluate, load_extractor

    seed = args.seed or 0
    smoothing = "none" if args.no_smooth else "centered"
    _print_config({"command": "evaluate", "data_root": args.data_root, "checkpoint": args.checkpoint,
                   "extractor": args.extractor, "out": args.out, "split": args.split, "frames": args.frames,
                   "smoothing": smoothing, "seed": seed})
    report = evaluate(args.data_root, args.checkpoint, load_extractor(args.extractor), args.out,
                      split=args.split, n_frames=args.frames, smoothing=smoothing, seed=seed)
    print(json.dumps({"aggregate": report.aggregate, "fvd": report.fvd, "skipped": report.skipped}, default=str))


COMMANDS = {
    "synth-data": _cmd_synth,
    "mask": _cmd_mask,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except TrainingDivergenceError as exc:
        sys.stderr.write(f"training diverged: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        logger.exception("unexpected failure")
        sys.stderr.write(f"runtime failure: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
