"""Autoregressive generator, multi-scale patch discriminators and the PatchNCE projection head.

Network-side tensors live in [-1, 1] (tanh range); ``to_model`` and
``from_model`` convert from and to the [0, 1] range used everywhere else.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .mask import downsample_mask

WINDOW = 3  # previous frames fed to the generator


def to_model(x):
    return x * 2.0 - 1.0


def from_model(x):
    return (x + 1.0) / 2.0


def apply_mask(x, m):
    """``m * x`` in [0, 1] space for a tensor given in [-1, 1]; masked-out pixels become black."""
    return m * (x + 1.0) - 1.0


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=False)
    if kind == "none":
        return nn.Identity()
    raise ContractError(f"unknown norm {kind!r}")


def init_weights(module, gain=0.02):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResnetBlock(nn.Module):
    # replicate padding keeps the block valid down to 1x1 feature maps
    def __init__(self, channels, norm="instance"):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate"),
            _norm(norm, channels),
            nn.ReLU(True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate"),
            _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


@dataclass
class GeneratorOutput:
    frame: torch.Tensor  # (B, 1, H, W) in [-1, 1]
    last_activation: torch.Tensor  # (B, ngf, H, W), pre-activation f_l


@dataclass
class GenerationState:
    """Conditioning for one autoregressive step (tensors in [-1, 1])."""

    cf_image: torch.Tensor  # (B, 3, H, W)
    prev_frames: tuple  # WINDOW tensors of shape (B, 1, H, W), oldest first
    step: int = 0

    def __post_init__(self):
        if len(self.prev_frames) != WINDOW:
            raise ContractError(f"need exactly {WINDOW} previous frames, got {len(self.prev_frames)}")
        shape = self.cf_image.shape[-2:]
        if any(f.shape[-2:] != shape for f in self.prev_frames):
            raise ContractError("previous frames and CF image differ in spatial shape")
        if self.step < 0:
            raise ContractError("step must be >= 0")

    def as_input(self):
        return torch.cat([self.cf_image, *self.prev_frames], dim=1)

    def advance(self, frame):
        """Slide the window forward by one emitted frame."""
        return GenerationState(self.cf_image, (*self.prev_frames[1:], frame), self.step + 1)


def cf_luminance(cf):
    """Luma channel of a ``(B, 3, H, W)`` tensor, keeping the channel axis."""
    w = torch.tensor([0.299, 0.587, 0.114], dtype=cf.dtype, device=cf.device).view(1, 3, 1, 1)
    return (cf * w).sum(dim=1, keepdim=True)


def bootstrap_state(cf):
    """Initial window: three copies of the CF luminance."""
    lum = cf_luminance(cf)
    return GenerationState(cf, (lum, lum, lum), 0)


def window_state(cf, history, t):
    """Window for predicting frame ``t`` from ``history`` (frames ``0..t-1``).

    Positions before the start of the series are filled with the CF luminance.
    """
    lum = cf_luminance(cf)
    prev = []
    for i in range(t - WINDOW, t):
        prev.append(history[i] if i >= 0 else lum)
    return GenerationState(cf, tuple(prev), t)


class Generator(nn.Module):
    """pix2pixHD-style global generator: 7x7 stem, stride-2 encoder, residual blocks, mirrored decoder.

    Input is the CF image (3 channels) concatenated with three previous
    frames (3 channels). ``last_activation`` is the output of the last
    full-resolution convolution before the 1-channel output projection.
    """

    def __init__(self, in_channels=6, out_channels=1, ngf=32, n_downsample=3, n_blocks=6, norm="instance"):
        super().__init__()
        self.in_channels = in_channels
        self.ngf = ngf
        self.n_downsample = n_downsample
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(in_channels, ngf, 7), _norm(norm, ngf), nn.ReLU(True)
        )
        self.down = nn.ModuleList()
        ch = ngf
        for _ in range(n_downsample):
            self.down.append(nn.Sequential(nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(norm, ch * 2), nn.ReLU(True)))
            ch *= 2
        self.blocks = nn.Sequential(*[ResnetBlock(ch, norm) for _ in range(n_blocks)])
        self.up = nn.ModuleList()
        for _ in range(n_downsample):
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(norm, ch // 2),
                nn.ReLU(True),
            ))
            ch //= 2
        self.last_conv = nn.Conv2d(ngf, ngf, 3, padding=1)
        self.to_frame = nn.Sequential(nn.ReLU(), nn.ReflectionPad2d(3), nn.Conv2d(ngf, out_channels, 7), nn.Tanh())

    @property
    def stride(self):
        return 2 ** self.n_downsample

    @property
    def feature_channels(self):
        """Channels of the PatchNCE feature levels (strides 1, 2, 4)."""
        return [self.ngf * 2 ** i for i in range(min(3, self.n_downsample + 1))]

    def check_size(self, h, w):
        if h % self.stride or w % self.stride:
            raise ContractError(f"spatial size {(h, w)} not divisible by generator stride {self.stride}")
        if min(h, w) < 4:
            raise ContractError("inputs must be at least 4 px per side")

    def forward(self, x):
        self.check_size(*x.shape[-2:])
        h = self.stem(x)
        for layer in self.down:
            h = layer(h)
        h = self.blocks(h)
        for layer in self.up:
            h = layer(h)
        f_l = self.last_conv(h)
        return GeneratorOutput(frame=self.to_frame(f_l), last_activation=f_l)

    def encode(self, x, n_levels=3):
        """Encoder features at strides 1, 2, 4, ... (first ``n_levels``)."""
        self.check_size(*x.shape[-2:])
        feats = []
        h = self.stem(x)
        feats.append(h)
        for layer in self.down[: n_levels - 1]:
            h = layer(h)
            feats.append(h)
        return feats


def generator_forward(generator, state):
    return generator(state.as_input())


def lift_to_generator_input(image, in_channels=6):
    """Turn a 1-channel frame or a 3-channel CF image into generator-shaped input.

    Frames are replicated over all channels; CF images keep their colour
    channels and fill the frame slots with their luminance.
    """
    c = image.shape[1]
    if c == 1:
        return image.expand(-1, in_channels, -1, -1)
    if c == 3:
        lum = cf_luminance(image)
        return torch.cat([image, lum.expand(-1, in_channels - 3, -1, -1)], dim=1)
    raise ContractError(f"cannot lift a {c}-channel image")


# --------------------------------------------------------------------------
# discriminators


class PatchDiscriminator(nn.Module):
    """pix2pixHD N-layer patch discriminator (4x4 kernels, padding 2, no normalisation).

    With ``n_layers=3`` the receptive field of every logit is 70x70. Layers
    carry no normalisation so that each logit depends only on its receptive
    field.
    """

    def __init__(self, in_channels=4, ndf=64, n_layers=3):
        super().__init__()
        self.n_layers = n_layers
        layers = [nn.Conv2d(in_channels, ndf, 4, stride=2, padding=2), nn.LeakyReLU(0.2, True)]
        nf = ndf
        for _ in range(1, n_layers):
            prev, nf = nf, min(nf * 2, 512)
            layers += [nn.Conv2d(prev, nf, 4, stride=2, padding=2), nn.LeakyReLU(0.2, True)]
        prev, nf = nf, min(nf * 2, 512)
        layers += [nn.Conv2d(prev, nf, 4, stride=1, padding=2), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(nf, 1, 4, stride=1, padding=2)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def discriminator_layers(n_layers=3):
    """(kernel, stride, padding) of each convolution in :class:`PatchDiscriminator`."""
    return [(4, 2, 2)] * n_layers + [(4, 1, 2), (4, 1, 2)]


def logit_shape(h, w, n_layers=3):
    for k, s, p in discriminator_layers(n_layers):
        h = (h + 2 * p - k) // s + 1
        w = (w + 2 * p - k) // s + 1
    return h, w


def receptive_field(i, j, n_layers=3):
    """Input pixel ranges ``((r0, r1), (c0, c1))`` (inclusive, may overhang) seen by logit ``(i, j)``."""
    r0 = r1 = i
    c0 = c1 = j
    for k, s, p in reversed(discriminator_layers(n_layers)):
        r0, r1 = r0 * s - p, r1 * s - p + k - 1
        c0, c1 = c0 * s - p, c1 * s - p + k - 1
    return (r0, r1), (c0, c1)


def downscale(x, k):
    """Average-pool a tensor to the resolution of discriminator ``k`` (1-based)."""
    factor = 2 ** (k - 1)
    return x if factor == 1 else F.avg_pool2d(x, factor)


class MultiScaleDiscriminator(nn.Module):
    """Three patch discriminators at scales 1, 1/2 and 1/4."""

    def __init__(self, in_channels=4, ndf=64, n_layers=3, num_scales=3):
        super().__init__()
        self.num_scales = num_scales
        self.n_layers = n_layers
        self.scales = nn.ModuleList([PatchDiscriminator(in_channels, ndf, n_layers) for _ in range(num_scales)])

    def forward_scale(self, k, conditioned_pair):
        if not 1 <= k <= self.num_scales:
            raise ContractError(f"discriminator index {k} outside 1..{self.num_scales}")
        return self.scales[k - 1](conditioned_pair)

    def forward(self, a, b):
        """Logit maps for every scale; ``a`` and ``b`` are given at full resolution."""
        return [discriminator_forward(self, k, downscale(a, k), downscale(b, k)) for k in range(1, self.num_scales + 1)]


def discriminator_forward(discriminator, k, input_image, candidate, full_size=None):
    """Logits of discriminator ``k`` for ``concat(input_image, candidate)``.

    Both tensors must already be at scale ``1 / 2**(k-1)``; pass ``full_size``
    to have that checked.
    """
    if input_image.shape[-2:] != candidate.shape[-2:] or input_image.shape[0] != candidate.shape[0]:
        raise ContractError(f"input {tuple(input_image.shape)} and candidate {tuple(candidate.shape)} do not match")
    if full_size is not None:
        factor = 2 ** (k - 1)
        expected = (full_size[0] // factor, full_size[1] // factor)
        if tuple(input_image.shape[-2:]) != expected:
            raise ContractError(f"discriminator {k} expects {expected}, got {tuple(input_image.shape[-2:])}")
    return discriminator.forward_scale(k, torch.cat([input_image, candidate], dim=1))


# --------------------------------------------------------------------------
# PatchNCE embeddings


class PatchProjector(nn.Module):
    """Per-level two-layer MLP head followed by L2 normalisation."""

    def __init__(self, channels, dim=256):
        super().__init__()
        self.dim = dim
        self.heads = nn.ModuleList([nn.Sequential(nn.Linear(c, dim), nn.ReLU(), nn.Linear(dim, dim)) for c in channels])

    def forward(self, level, x):
        return F.normalize(self.heads[level](x), dim=-1, eps=1e-12)


@dataclass
class PatchEmbeddingSet:
    embeddings: list  # per level: (B, N_l, D) unit-norm tensors
    locations: list  # per level: (N_l,) flat spatial indices
    weights: list  # per level: (N_l,) mask weights in [0, 1]

    @property
    def n_levels(self):
        return len(self.embeddings)


def sample_locations(shape, n_patches, rng, mask=None):
    """Flat indices of ``n_patches`` locations on a grid of ``shape`` plus their mask weights.

    With a mask, only cells whose pooled weight exceeds 0.5 are eligible;
    when fewer than ``n_patches`` cells qualify the draw is unrestricted.
    """
    if n_patches < 1:
        raise ContractError("n_patches must be >= 1")
    h, w = shape
    n = min(n_patches, h * w)
    if mask is None:
        loc = rng.permutation(h * w)[:n]
        return loc, np.ones(n, dtype=np.float32)
    level = mask if mask.resolution == (h, w) else downsample_mask(mask, target_shape=(h, w))
    flat = level.values.reshape(-1)
    eligible = np.flatnonzero(flat > 0.5)
    if len(eligible) >= n:
        loc = rng.choice(eligible, size=n, replace=False)
    else:
        loc = rng.permutation(h * w)[:n]
    return loc, flat[loc].astype(np.float32)


def embed_patches(features, n_patches, projector, mask=None, rng=None, locations=None):
    """Project features at sampled (or given) locations into unit embeddings.

    ``features`` is a list of ``(B, C_l, H_l, W_l)`` tensors. Passing the
    ``locations``/``weights`` of a previous :class:`PatchEmbeddingSet`
    (as ``locations=``) reuses its sampling for a second image.
    """
    embeds, locs, weights = [], [], []
    for level, feat in enumerate(features):
        b, c, h, w = feat.shape
        if locations is not None:
            loc, wt = locations.locations[level], locations.weights[level]
        else:
            loc, wt = sample_locations((h, w), n_patches, rng, mask)
        idx = torch.as_tensor(np.asarray(loc), dtype=torch.long, device=feat.device)
        picked = feat.flatten(2).index_select(2, idx).transpose(1, 2)  # (B, N, C)
        embeds.append(projector(level, picked))
        locs.append(np.asarray(loc))
        weights.append(np.asarray(wt, dtype=np.float32))
    return PatchEmbeddingSet(embeds, locs, weights)
