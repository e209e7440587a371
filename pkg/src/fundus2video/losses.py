"""Training objectives: knowledge-boosted attention, mask-enhanced PatchNCE, knowledge-aware GAN."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError, TrainingDivergenceError
from .mask import KnowledgeMask, scale_mask_tensor
from .models import apply_mask, discriminator_forward, downscale

DEFAULT_TAU = 0.07
LOG_CLAMP = 1e-7
_LOG_MIN = math.log(LOG_CLAMP)

CSV_FIELDS = ("step", "up", "sp", "att", "gan_g", "gan_d", "total")


@dataclass
class LossWeights:
    lambda_up: float = 1.0
    lambda_sp: float = 1.0
    lambda_att: float = 4.0
    lambda_gan: float = 2.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ContractError(f"{name} must be >= 0, got {value}")


@dataclass
class LossBreakdown:
    up: float
    sp: float
    att: float
    gan_g: float
    gan_d: float
    total: float

    def is_finite(self):
        return all(math.isfinite(v) for v in asdict(self).values())

    def csv_row(self, step):
        return [str(step)] + [repr(float(getattr(self, k))) for k in CSV_FIELDS[1:]]


def _as_mask_tensor(mask, like):
    if isinstance(mask, KnowledgeMask):
        mask = mask.as_tensor(like.dtype)
    return mask.to(like.dtype)


def attention_loss(f_l, mask):
    """Mean squared error between ``ReLU(mean_c(f_l) * m)`` and ``m``.

    ``f_l`` is ``(B, C, H, W)``; ``mask`` a :class:`KnowledgeMask` or a
    ``(B|1, 1, H, W)`` tensor.
    """
    m = _as_mask_tensor(mask, f_l)
    reduced = f_l.mean(dim=1, keepdim=True)
    if reduced.shape[-2:] != m.shape[-2:]:
        raise ContractError(f"activation {tuple(f_l.shape[-2:])} and mask {tuple(m.shape[-2:])} differ in size")
    attention = F.relu(reduced * m)
    return ((attention - m) ** 2).mean()


def info_nce(anchor, positive, negatives, tau=DEFAULT_TAU):
    """``-log(e^{s+} / (e^{s+} + sum_j e^{s-_j}))`` with ``s = <v, u> / tau``."""
    negatives = negatives.reshape(-1, anchor.shape[-1])
    if negatives.shape[0] < 1:
        raise ContractError("info_nce needs at least one negative")
    for name, v in (("anchor", anchor), ("positive", positive)):
        if torch.linalg.vector_norm(v) == 0:
            raise ContractError(f"{name} has zero norm")
    if (torch.linalg.vector_norm(negatives, dim=-1) == 0).any():
        raise ContractError("a negative has zero norm")
    logits = torch.cat([(anchor * positive).sum().reshape(1), negatives @ anchor]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def patch_nce_level(query, keys, weights, tau=DEFAULT_TAU):
    """Weighted PatchNCE for one feature level, or ``None`` when fewer than two locations carry weight.

    ``query`` and ``keys`` are ``(B, N, D)``; row ``i`` of ``keys`` is the
    positive for query ``i``, all other weighted rows are its negatives.
    Locations with zero weight take no part at all.
    """
    w = torch.as_tensor(weights, dtype=query.dtype, device=query.device)
    active = torch.nonzero(w > 0).flatten()
    if active.numel() < 2:
        return None
    q, k, w = query[:, active], keys[:, active], w[active]
    logits = torch.bmm(q, k.transpose(1, 2)) / tau  # (B, N, N)
    per_location = torch.logsumexp(logits, dim=2) - torch.diagonal(logits, dim1=1, dim2=2)
    return ((per_location * w).sum(dim=1) / w.sum()).mean()


def _patch_nce(anchor_set, key_set, tau):
    terms = []
    for level in range(anchor_set.n_levels):
        if not torch.equal(torch.as_tensor(anchor_set.locations[level]), torch.as_tensor(key_set.locations[level])):
            raise ContractError("anchor and key embeddings were sampled at different locations")
        value = patch_nce_level(anchor_set.embeddings[level], key_set.embeddings[level], anchor_set.weights[level], tau)
        if value is not None:
            terms.append(value)
    if not terms:
        return anchor_set.embeddings[0].new_zeros(())
    return torch.stack(terms).mean()


def masked_up_loss(gen_embeds, cf_embeds, tau=DEFAULT_TAU):
    """Mask-enhanced unsupervised PatchNCE: generated patch vs the CF patch at the same place."""
    return _patch_nce(gen_embeds, cf_embeds, tau)


def masked_sp_loss(gen_embeds, gt_embeds, tau=DEFAULT_TAU):
    """Mask-enhanced supervised PatchNCE: generated patch vs the ground-truth patch at the same place."""
    return _patch_nce(gen_embeds, gt_embeds, tau)


def _clamped_logsigmoid(x):
    return torch.clamp(F.logsigmoid(x), min=_LOG_MIN)


def discriminator_loss(real_logits, fake_logits):
    """``(d_term, g_term)`` from patch logits; means over the logit maps.

    ``d_term = -mean log D(real) - mean log(1 - D(fake))`` and the
    non-saturating ``g_term = -mean log D(fake)``.
    """
    if not (torch.isfinite(real_logits).all() and torch.isfinite(fake_logits).all()):
        raise ContractError("discriminator logits are not finite")
    d_term = -_clamped_logsigmoid(real_logits).mean() - _clamped_logsigmoid(-fake_logits).mean()
    g_term = -_clamped_logsigmoid(fake_logits).mean()
    return d_term, g_term


def _d_only(real_logits, fake_logits):
    if not (torch.isfinite(real_logits).all() and torch.isfinite(fake_logits).all()):
        raise ContractError("discriminator logits are not finite")
    return -_clamped_logsigmoid(real_logits).mean() - _clamped_logsigmoid(-fake_logits).mean()


def _g_only(fake_logits):
    if not torch.isfinite(fake_logits).all():
        raise ContractError("discriminator logits are not finite")
    return -_clamped_logsigmoid(fake_logits).mean()


def gan_loss_knowledge_aware(discriminator, k, x, y, fake, mask=None, terms="both"):
    """Scale-``k`` loss on full images plus the same loss on mask-multiplied images.

    ``x`` (CF), ``y`` (real frame) and ``fake`` are full-resolution tensors in
    [-1, 1]; ``mask`` a binary ``(B|1, 1, H, W)`` tensor or ``None`` (plain
    loss only). ``terms`` selects what is computed: ``"d"`` (fake detached),
    ``"g"``, or ``"both"``. Returns ``(d_term, g_term)`` with ``None`` for
    terms not requested.
    """
    if terms not in ("d", "g", "both"):
        raise ContractError(f"terms must be 'd', 'g' or 'both', got {terms!r}")
    xk, yk, fk = downscale(x, k), downscale(y, k), downscale(fake, k)
    variants = [(xk, yk, fk)]
    if mask is not None:
        mk = scale_mask_tensor(_as_mask_tensor(mask, x), 2 ** (k - 1))
        variants.append((apply_mask(xk, mk), apply_mask(yk, mk), apply_mask(fk, mk)))

    want_d, want_g = terms in ("d", "both"), terms in ("g", "both")
    d_total = g_total = None
    for a, b, f in variants:
        pairs_a, pairs_b = [], []
        if want_d:
            pairs_a += [a, a]
            pairs_b += [b, f.detach()]
        if want_g:
            pairs_a.append(a)
            pairs_b.append(f)
        # one batched pass; the discriminator has no cross-sample normalisation
        logits = discriminator_forward(discriminator, k, torch.cat(pairs_a), torch.cat(pairs_b))
        chunks = logits.chunk(len(pairs_a))
        if want_d:
            d = _d_only(chunks[0], chunks[1])
            d_total = d if d_total is None else d_total + d
        if want_g:
            g = _g_only(chunks[-1])
            g_total = g if g_total is None else g_total + g
    return d_total, g_total


def gan_loss(discriminator, x, y, fake, mask=None, terms="both"):
    """Sum of :func:`gan_loss_knowledge_aware` over all discriminator scales."""
    d_total = g_total = None
    for k in range(1, discriminator.num_scales + 1):
        d, g = gan_loss_knowledge_aware(discriminator, k, x, y, fake, mask, terms)
        if d is not None:
            d_total = d if d_total is None else d_total + d
        if g is not None:
            g_total = g if g_total is None else g_total + g
    return d_total, g_total


def combine(up, sp, att, gan_g, weights):
    return (weights.lambda_up * up + weights.lambda_sp * sp
            + weights.lambda_att * att + weights.lambda_gan * gan_g)


def total_loss(up, sp, att, gan_g, gan_d=0.0, weights=None, step=None):
    """Weighted generator objective as a :class:`LossBreakdown` of plain floats."""
    weights = weights or LossWeights()
    parts = [float(p) for p in (up, sp, att, gan_g, gan_d)]
    total = float(combine(*parts[:4], weights))
    breakdown = LossBreakdown(*parts, total=total)
    if not breakdown.is_finite():
        raise TrainingDivergenceError(f"non-finite loss at step {step}: {breakdown}", step=step, breakdown=breakdown)
    return breakdown
