"""Adversarial training loop with scheduled teacher forcing."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, augment, sample_training_frames
from .errors import CheckpointError, ConfigurationError
from .mask import DEFAULT_THRESHOLD, compute_mask
from .models import (
    Generator,
    MultiScaleDiscriminator,
    PatchProjector,
    apply_mask,
    embed_patches,
    from_model,
    init_weights,
    lift_to_generator_input,
    to_model,
    window_state,
)

logger = logging.getLogger(__name__)

NCE_LEVELS = 3


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1
    lr: float = 2e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lr_step_iters: int = 50
    lr_decay: float = 0.9
    lr_step_unit: str = "iteration"  # or "epoch"
    teacher_forcing_prob: float = 0.5
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    image_size: int = 512
    frames_per_sequence: int = 12
    seed: int = 0
    mask_threshold: float = DEFAULT_THRESHOLD
    use_knowledge_mask: bool = True
    nce_mask_mode: str = "sample"  # or "pixel": multiply images by the mask before encoding
    n_patches: int = 256
    nce_tau: float = L.DEFAULT_TAU
    proj_dim: int = 256
    ngf: int = 64
    n_blocks: int = 6
    ndf: int = 64
    n_layers_d: int = 3
    num_d: int = 3
    grad_clip: float = 10.0
    augment: bool = True
    max_steps: int | None = None
    sample_every: int = 0
    save_every: int = 1  # epochs between checkpoints; 0 keeps only final.ckpt

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        for name in ("epochs", "batch_size", "lr", "beta1", "beta2", "lr_step_iters", "lr_decay",
                     "image_size", "frames_per_sequence", "n_patches", "nce_tau", "proj_dim",
                     "ngf", "n_blocks", "ndf", "n_layers_d", "num_d", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.teacher_forcing_prob <= 1.0:
            raise ConfigurationError("teacher_forcing_prob must be in [0, 1]")
        if self.save_every < 0 or self.sample_every < 0:
            raise ConfigurationError("save_every and sample_every must be >= 0")
        if self.batch_size != 1:
            raise ConfigurationError("only batch_size 1 is supported")
        if self.frames_per_sequence % 3:
            raise ConfigurationError("frames_per_sequence must be a multiple of 3 (equal frames per phase)")
        if self.lr_step_unit not in ("iteration", "epoch"):
            raise ConfigurationError("lr_step_unit must be 'iteration' or 'epoch'")
        if self.nce_mask_mode not in ("sample", "pixel"):
            raise ConfigurationError("nce_mask_mode must be 'sample' or 'pixel'")
        if self.image_size % 8:
            raise ConfigurationError("image_size must be divisible by 8")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def arch(self):
        return {"ngf": self.ngf, "n_blocks": self.n_blocks, "n_downsample": 3, "ndf": self.ndf,
                "n_layers_d": self.n_layers_d, "num_d": self.num_d, "proj_dim": self.proj_dim,
                "image_size": self.image_size}


def build_networks(arch):
    generator = Generator(ngf=arch["ngf"], n_blocks=arch["n_blocks"], n_downsample=arch["n_downsample"])
    discriminator = MultiScaleDiscriminator(ndf=arch["ndf"], n_layers=arch["n_layers_d"], num_scales=arch["num_d"])
    projector = PatchProjector(generator.feature_channels[:NCE_LEVELS], dim=arch["proj_dim"])
    return generator, discriminator, projector


@dataclass
class TrainState:
    generator: Generator
    discriminator: MultiScaleDiscriminator
    projector: PatchProjector
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    current_lr: float = 0.0
    last_fakes: list | None = None

    def generator_params(self):
        return list(self.generator.parameters()) + list(self.projector.parameters())


def scheduled_lr(config, step, epoch=0):
    count = step if config.lr_step_unit == "iteration" else epoch
    return config.lr * config.lr_decay ** (count // config.lr_step_iters)


def _set_lr(state, lr):
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr
    state.current_lr = lr


def init_train_state(config):
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        generator, discriminator, projector = build_networks(config.arch())
        for net in (generator, discriminator, projector):
            init_weights(net)
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(list(generator.parameters()) + list(projector.parameters()), lr=config.lr, betas=betas)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr, betas=betas)
    state = TrainState(generator, discriminator, projector, opt_g, opt_d, np.random.default_rng(config.seed))
    _set_lr(state, scheduled_lr(config, 0, 0))
    return state


def scheduled_input_select(gt_prev, gen_prev, p, rng):
    """Return the generated window with probability ``p``, otherwise the ground-truth one."""
    return gen_prev if rng.random() < p else gt_prev


def _to_tensor_cf(cf):
    return to_model(torch.from_numpy(np.ascontiguousarray(cf, dtype=np.float32)).permute(2, 0, 1)[None])


def _to_tensor_frame(frame):
    return to_model(torch.from_numpy(np.ascontiguousarray(frame, dtype=np.float32))[None, None])


def _clip(params, max_norm):
    params = [p for p in params if p.grad is not None]
    if params:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def sequence_mask(sequence, config):
    return compute_mask(sequence.frames[0], sequence.frames[-1], config.mask_threshold)


def train_step(sequence, state, config, update_generator=True, update_discriminator=True):
    """One discriminator update then one generator update on a whole sequence.

    Every frame of the sequence is predicted from a three-frame window; the
    window is the ground-truth or the detached generated history, chosen
    per time step. Returns the :class:`~fundus2video.losses.LossBreakdown`.
    """
    G, D, P = state.generator, state.discriminator, state.projector
    G.train(), D.train(), P.train()
    weights = config.weights
    use_mask = config.use_knowledge_mask

    cf = _to_tensor_cf(sequence.cf_image)
    gt = [_to_tensor_frame(f) for f in sequence.frames]
    knowledge = sequence_mask(sequence, config)
    m = knowledge.as_tensor() if use_mask else None

    fakes, acts = [], []
    for t in range(len(gt)):
        gt_window = window_state(cf, gt, t)
        gen_window = window_state(cf, [f.detach() for f in fakes], t)
        out = G(scheduled_input_select(gt_window, gen_window, config.teacher_forcing_prob, state.rng).as_input())
        fakes.append(out.frame)
        acts.append(out.last_activation)
    fake = torch.cat(fakes)
    real = torch.cat(gt)
    x = cf.expand(len(gt), -1, -1, -1)

    _requires_grad(D, True)
    d_loss, _ = L.gan_loss(D, x, real, fake, m, terms="d")
    if update_discriminator:
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        _clip(D.parameters(), config.grad_clip)
        state.opt_d.step()

    _requires_grad(D, False)
    _, g_gan = L.gan_loss(D, x, real, fake, m, terms="g")
    att = L.attention_loss(torch.cat(acts), m) if use_mask else fake.new_zeros(())
    up, sp = _nce_terms(G, P, cf, real, fake, knowledge if use_mask else None, config, state.rng)
    total = L.combine(up, sp, att, g_gan, weights)
    breakdown = L.total_loss(up.item(), sp.item(), att.item(), g_gan.item(), d_loss.item(), weights, step=state.step)
    if update_generator:
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        _clip(state.generator_params(), config.grad_clip)
        state.opt_g.step()
    _requires_grad(D, True)

    state.last_fakes = [from_model(f.detach())[0, 0].numpy() for f in fakes]
    state.step += 1
    _set_lr(state, scheduled_lr(config, state.step, state.epoch))
    return breakdown


def _nce_terms(G, P, cf, real, fake, knowledge, config, rng):
    n_frames = fake.shape[0]
    sample_mask = knowledge
    if knowledge is not None and config.nce_mask_mode == "pixel":
        m = knowledge.as_tensor(fake.dtype)
        cf, real, fake = apply_mask(cf, m), apply_mask(real, m), apply_mask(fake, m)
        sample_mask = None
    feats_fake = G.encode(lift_to_generator_input(fake), NCE_LEVELS)
    with torch.no_grad():
        feats_real = G.encode(lift_to_generator_input(real), NCE_LEVELS)
        feats_cf = G.encode(lift_to_generator_input(cf), NCE_LEVELS)
    gen_set = embed_patches(feats_fake, config.n_patches, P, mask=sample_mask, rng=rng)
    with torch.no_grad():
        cf_set = embed_patches(feats_cf, config.n_patches, P, locations=gen_set)
        gt_set = embed_patches(feats_real, config.n_patches, P, locations=gen_set)
    cf_set.embeddings = [e.expand(n_frames, -1, -1) for e in cf_set.embeddings]
    up = L.masked_up_loss(gen_set, cf_set, config.nce_tau)
    sp = L.masked_sp_loss(gen_set, gt_set, config.nce_tau)
    return up, sp


# --------------------------------------------------------------------------
# checkpoints


def _optimizer_arrays(prefix, opt):
    sd = opt.state_dict()
    arrays = {}
    for idx, slot in sd["state"].items():
        for key, value in slot.items():
            arrays[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return arrays, sd["param_groups"]


def _restore_optimizer(prefix, opt, arrays, groups):
    state = {}
    for key, value in arrays.items():
        if key.startswith(prefix + "/"):
            _, idx, name = key.split("/")
            state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
    opt.load_state_dict({"state": state, "param_groups": groups})


def module_arrays(prefix, module):
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module(prefix, module, arrays):
    sd = {}
    for key in module.state_dict():
        full = f"{prefix}.{key}"
        if full not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {full}")
        sd[key] = torch.from_numpy(np.array(arrays[full]))
    try:
        module.load_state_dict(sd, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the {prefix} architecture: {exc}") from exc


def save_train_state(path, state, config):
    arrays = {}
    arrays.update(module_arrays("generator", state.generator))
    arrays.update(module_arrays("discriminator", state.discriminator))
    arrays.update(module_arrays("projector", state.projector))
    og, groups_g = _optimizer_arrays("optim_g", state.opt_g)
    od, groups_d = _optimizer_arrays("optim_d", state.opt_d)
    arrays.update(og)
    arrays.update(od)
    header = {
        "kind": "train",
        "arch": config.arch(),
        "config": config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "current_lr": state.current_lr,
        "rng_state": state.rng.bit_generator.state,
        "optim_groups": {"g": groups_g, "d": groups_d},
    }
    return save_checkpoint(path, header, arrays)


def load_train_state(path, config):
    header, arrays = load_checkpoint(path)
    if header.get("arch") != config.arch():
        raise CheckpointError(f"checkpoint architecture {header.get('arch')} does not match config {config.arch()}")
    state = init_train_state(config)
    load_module("generator", state.generator, arrays)
    load_module("discriminator", state.discriminator, arrays)
    load_module("projector", state.projector, arrays)
    groups = header.get("optim_groups", {})
    _restore_optimizer("optim_g", state.opt_g, arrays, groups["g"])
    _restore_optimizer("optim_d", state.opt_d, arrays, groups["d"])
    state.rng.bit_generator.state = header["rng_state"]
    state.step = int(header["step"])
    state.epoch = int(header["epoch"])
    _set_lr(state, scheduled_lr(config, state.step, state.epoch))
    return state


# --------------------------------------------------------------------------
# loop


def _save_grid(path, sequence, fakes):
    from PIL import Image

    top = np.concatenate(sequence.frames, axis=1)
    bottom = np.concatenate(fakes, axis=1)
    grid = np.round(np.clip(np.concatenate([top, bottom], axis=0), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(grid, mode="L").save(path)


def fit(samples, config, out_dir, resume=None, augment_config=None):
    """Train on ``samples`` and return the path of the final checkpoint.

    Writes ``losses.csv``, ``checkpoint_epoch_NNN.ckpt`` every
    ``config.save_every`` epochs and ``final.ckpt``. Resuming restarts the interrupted epoch.
    """
    if not samples:
        raise ConfigurationError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = load_train_state(resume, config) if resume else init_train_state(config)
    per_phase = config.frames_per_sequence // 3
    aug = augment_config or AugmentConfig()

    csv_path = out_dir / "losses.csv"
    mode = "a" if resume and csv_path.exists() else "w"
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(L.CSV_FIELDS)
        done = False
        while state.epoch < config.epochs and not done:
            _set_lr(state, scheduled_lr(config, state.step, state.epoch))
            for i in state.rng.permutation(len(samples)):
                if config.max_steps is not None and state.step >= config.max_steps:
                    done = True
                    break
                seq = sample_training_frames(samples[int(i)], state.rng, per_phase)
                if config.augment:
                    seq = augment(seq, state.rng, aug)
                breakdown = train_step(seq, state, config)
                writer.writerow(breakdown.csv_row(state.step))
                fh.flush()
                logger.info("step %d epoch %d total %.4f lr %.3g", state.step, state.epoch, breakdown.total, state.current_lr)
                if config.sample_every and state.step % config.sample_every == 0:
                    _save_grid(out_dir / f"sample_{state.step:06d}.png", seq, state.last_fakes)
            if not done:
                state.epoch += 1
                if config.save_every and state.epoch % config.save_every == 0:
                    save_train_state(out_dir / f"checkpoint_epoch_{state.epoch:03d}.ckpt", state, config)
    final = save_train_state(out_dir / "final.ckpt", state, config)
    return final
