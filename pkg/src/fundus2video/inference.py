"""Autoregressive rollout and triple-frame smoothing."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import file_sha256, load_checkpoint
from .data import preprocess
from .errors import CheckpointError, ConfigurationError, ContractError
from .models import Generator, bootstrap_state, from_model, to_model, window_state
from .trainer import load_module

SMOOTHING_MODES = ("centered", "trailing", "none")


@dataclass
class GeneratedVideo:
    frames: list
    fps_hint: float = 2.0
    provenance: dict = field(default_factory=dict)


def load_generator(checkpoint):
    """Build the generator described by a checkpoint header and load its weights."""
    header, arrays = load_checkpoint(checkpoint)
    arch = header.get("arch")
    if not arch:
        raise CheckpointError(f"{checkpoint} has no architecture header")
    try:
        generator = Generator(ngf=arch["ngf"], n_blocks=arch["n_blocks"], n_downsample=arch["n_downsample"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{checkpoint}: bad architecture header {arch}") from exc
    load_module("generator", generator, arrays)
    generator.eval()
    return generator, header


@torch.no_grad()
def rollout(cf, n_frames, generator):
    """Generate ``n_frames`` raw frames in [0, 1] from an ``(H, W, 3)`` CF image."""
    if n_frames < 1:
        raise ContractError("n_frames must be >= 1")
    generator.eval()
    cf_t = to_model(torch.from_numpy(np.ascontiguousarray(cf, dtype=np.float32)).permute(2, 0, 1)[None])
    history = []
    state = bootstrap_state(cf_t)
    for t in range(n_frames):
        history.append(generator(state.as_input()).frame)
        state = window_state(cf_t, history, t + 1)
    return [np.clip(from_model(f)[0, 0].numpy(), 0.0, 1.0) for f in history]


def smooth_triple_average(raw, mode="centered"):
    """Width-3 temporal mean filter.

    ``centered`` averages frames ``t-1, t, t+1`` (truncated at both ends),
    ``trailing`` averages ``t-2, t-1, t`` and ``none`` returns copies.
    """
    if len(raw) < 1:
        raise ContractError("need at least one frame")
    if mode not in SMOOTHING_MODES:
        raise ContractError(f"unknown smoothing mode {mode!r}")
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in raw])
    n = len(stack)
    out = []
    for t in range(n):
        lo, hi = (t - 1, t + 2) if mode == "centered" else (t - 2, t + 1) if mode == "trailing" else (t, t + 1)
        out.append(stack[max(lo, 0) : min(hi, n)].mean(axis=0).astype(np.asarray(raw[0]).dtype))
    return out


def _save_gray(path, frame):
    Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def generate_video(cf_path, checkpoint, n_frames, out_dir, smoothing="centered", force=False, seed=0, fps_hint=2.0):
    """Rollout + smoothing + PNG export. Writes ``frame_NNN.png`` and ``video.json``."""
    cf_path, out_dir = Path(cf_path), Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigurationError(f"output directory {out_dir} is not empty (use --force to overwrite)")
    try:
        raw_cf = np.asarray(Image.open(cf_path).convert("RGB"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read CF image {cf_path}: {exc}") from exc
    generator, header = load_generator(checkpoint)
    cf = preprocess(raw_cf, header["arch"]["image_size"])
    frames = smooth_triple_average(rollout(cf, n_frames, generator), smoothing)

    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(frames):
        name = f"frame_{i:03d}.png"
        _save_gray(out_dir / name, frame)
        names.append(name)
    provenance = {
        "checkpoint": str(checkpoint),
        "checkpoint_sha256": file_sha256(checkpoint),
        "checkpoint_step": header.get("step"),
        "seed": seed,
        "cf": str(cf_path),
        "smoothing": smoothing,
    }
    manifest = {"frames": names, "n_frames": n_frames, "fps_hint": fps_hint, "provenance": provenance}
    (out_dir / "video.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return GeneratedVideo(frames=frames, fps_hint=fps_hint, provenance=provenance)
