"""Unsupervised knowledge mask from the first and last angiography frames.

Pixels whose intensity changes by more than ``threshold`` grey levels
(0-255 scale) between the first and the last frame are marked. Leakage
around lesions makes these the clinically interesting regions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import luminance
from .errors import ContractError

DEFAULT_THRESHOLD = 45.0
# Differences within this many grey levels of the threshold count as ties
# (not set); absorbs float32 rounding of k/255 values.
TIE_EPS = 1e-4


@dataclass
class KnowledgeMask:
    values: np.ndarray
    kind: str = "binary"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ContractError(f"mask must be 2-D, got shape {self.values.shape}")
        if self.kind not in ("binary", "weighted"):
            raise ContractError(f"unknown mask kind {self.kind!r}")

    @property
    def resolution(self):
        return self.values.shape

    @classmethod
    def ones(cls, shape):
        return cls(np.ones(shape, dtype=np.float32))

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape, dtype=np.float32))

    def as_tensor(self, dtype=torch.float32):
        """``(1, 1, H, W)`` tensor view for network-side code."""
        return torch.from_numpy(self.values).to(dtype)[None, None]


def difference_levels(first_frame, last_frame):
    """Absolute luminance difference on the 0-255 scale, float64."""
    a = np.asarray(luminance(np.asarray(first_frame)), dtype=np.float64)
    b = np.asarray(luminance(np.asarray(last_frame)), dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"frame shapes differ: {a.shape} vs {b.shape}")
    scale = 1.0 if np.issubdtype(np.asarray(first_frame).dtype, np.integer) else 255.0
    return np.abs(b - a) * scale


def compute_mask(first_frame, last_frame, threshold=DEFAULT_THRESHOLD, morphology=False):
    if threshold < 0:
        raise ContractError("threshold must be >= 0")
    diff = difference_levels(first_frame, last_frame)
    values = diff > threshold + TIE_EPS
    if morphology:
        kernel = np.ones((3, 3), dtype=bool)
        values = ndimage.binary_closing(ndimage.binary_opening(values, kernel), kernel)
    return KnowledgeMask(values.astype(np.float32), kind="binary")


def downsample_mask(mask, factor=None, target_shape=None):
    """Area-average pooling; the result is a weighted mask.

    Pass either an integer ``factor`` dividing both sides or an explicit
    ``target_shape``. Non-divisible target shapes fall back to adaptive
    average pooling.
    """
    h, w = mask.resolution
    if target_shape is None:
        if factor is None:
            raise ContractError("give a factor or a target shape")
        factor = int(factor)
        if factor < 1 or h % factor or w % factor:
            raise ContractError(f"factor {factor} does not divide mask resolution {(h, w)}")
        target_shape = (h // factor, w // factor)
    th, tw = target_shape
    if h % th == 0 and w % tw == 0:
        fh, fw = h // th, w // tw
        pooled = mask.values.astype(np.float64).reshape(th, fh, tw, fw).mean(axis=(1, 3))
    else:
        t = torch.from_numpy(mask.values.astype(np.float64))[None, None]
        pooled = F.adaptive_avg_pool2d(t, (th, tw))[0, 0].numpy()
    return KnowledgeMask(pooled.astype(np.float32), kind="weighted")


def mask_coverage(mask):
    return float(mask.values.astype(np.float64).mean())


def iou(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def scale_mask_tensor(mask, factor):
    """Pool a ``(B, 1, H, W)`` mask tensor by ``factor`` and re-binarise at 0.5."""
    if factor == 1:
        return mask
    pooled = F.avg_pool2d(mask, factor)
    return (pooled > 0.5).to(mask.dtype)
