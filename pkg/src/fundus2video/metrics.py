"""Video quality metrics: PSNR, SSIM, LPIPS-style and FVD-style distances.

LPIPS and FVD depend on a feature extractor. The built-in
:class:`RandomProjectionExtractor` is a deterministic stand-in so the
harness runs offline; its numbers are not comparable with values computed
on pretrained perceptual or video-action backbones, which is why every
report carries the extractor id.
"""
from __future__ import annotations

import csv
import importlib
import importlib.util
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data import load_dataset, luminance, read_manifest, sample_training_frames
from .errors import ConfigurationError, ContractError, InsufficientFramesError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SQRTM_EPS = 1e-10


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak ** 2 / mse))


def _gaussian_taps(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, taps):
    out = ndimage.correlate1d(img, taps, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, taps, axis=1, mode="reflect")
    r = len(taps) // 2
    return out[r:-r, r:-r]


def ssim(a, b, data_range=1.0):
    """Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _check_pair(luminance(a), luminance(b))
    if min(a.shape) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    taps = _gaussian_taps()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a ** 2
    var_b = _filter_valid(b * b, taps) - mu_b ** 2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# feature-based metrics


class FeatureExtractor(Protocol):
    id: str

    def embed_image(self, image) -> np.ndarray: ...

    def embed_video(self, frames) -> np.ndarray: ...


class RandomProjectionExtractor:
    """Fixed-seed Gaussian projection of area-downsampled frames.

    Video features are the per-frame features' temporal mean, standard
    deviation and mean absolute frame-to-frame change, so their length does
    not depend on the clip length.
    """

    def __init__(self, size=16, dim=64, seed=0):
        self.size = size
        self.dim = dim
        self.seed = seed
        self.id = f"fallback-random-projection-v1(size={size},dim={dim},seed={seed})"
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((dim, size * size)) / size

    def embed_image(self, image):
        x = torch.from_numpy(np.asarray(luminance(np.asarray(image)), dtype=np.float64))[None, None]
        small = F.adaptive_avg_pool2d(x, (self.size, self.size)).reshape(-1).numpy()
        return self._proj @ (small - 0.5)

    def embed_video(self, frames):
        if len(frames) == 0:
            raise ContractError("cannot embed an empty video")
        feats = np.stack([self.embed_image(f) for f in frames])
        motion = np.abs(np.diff(feats, axis=0)).mean(axis=0) if len(feats) > 1 else np.zeros(self.dim)
        return np.concatenate([feats.mean(axis=0), feats.std(axis=0), motion])


def lpips(a, b, extractor):
    """Mean squared difference of extractor image features."""
    _check_pair(luminance(np.asarray(a)), luminance(np.asarray(b)))
    fa, fb = extractor.embed_image(a), extractor.embed_image(b)
    return float(np.mean((fa - fb) ** 2))


def _sqrtm_psd(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps=SQRTM_EPS):
    """``|mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via symmetric eigendecompositions."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    d = len(mu1)
    s1 = s1 + eps * np.eye(d)
    s2 = s2 + eps * np.eye(d)
    root1 = _sqrtm_psd(s1)
    # (S1 S2)^(1/2) has the same trace as (S1^(1/2) S2 S1^(1/2))^(1/2), which is symmetric
    inner = root1 @ s2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0, None)).sum()
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_cross)
    return max(value, 0.0)


def feature_fvd(real_features, fake_features):
    real, fake = np.asarray(real_features, dtype=np.float64), np.asarray(fake_features, dtype=np.float64)
    if real.ndim == 1:
        real = real[:, None]
    if fake.ndim == 1:
        fake = fake[:, None]
    if len(real) < 2 or len(fake) < 2:
        raise ContractError("FVD needs at least two videos per set")
    cov = lambda x: np.atleast_2d(np.cov(x, rowvar=False))
    return frechet_distance(real.mean(axis=0), cov(real), fake.mean(axis=0), cov(fake))


def fvd(real_videos, fake_videos, extractor, fake_extractor=None):
    """Fréchet distance between Gaussian fits of video features."""
    if fake_extractor is not None and fake_extractor.id != extractor.id:
        raise ContractError(f"extractor mismatch: {extractor.id!r} vs {fake_extractor.id!r}")
    ext_fake = fake_extractor or extractor
    real = np.stack([extractor.embed_video(v) for v in real_videos])
    fake = np.stack([ext_fake.embed_video(v) for v in fake_videos])
    return feature_fvd(real, fake)


def load_extractor(spec):
    """``"fallback"`` or ``"module:attr"`` / ``"path/to/file.py:attr"`` naming an extractor or factory."""
    if spec in (None, "", "fallback"):
        return RandomProjectionExtractor()
    target, _, attr = spec.rpartition(":")
    if not target or not attr:
        raise ConfigurationError(f"extractor plugin must look like 'module:attr', got {spec!r}")
    try:
        if target.endswith(".py"):
            loader = importlib.util.spec_from_file_location("fundus2video_extractor_plugin", target)
            module = importlib.util.module_from_spec(loader)
            loader.loader.exec_module(module)
        else:
            module = importlib.import_module(target)
        obj = getattr(module, attr)
    except (ImportError, AttributeError, FileNotFoundError) as exc:
        raise ConfigurationError(f"cannot load extractor {spec!r}: {exc}") from exc
    extractor = obj() if isinstance(obj, type) or (callable(obj) and not hasattr(obj, "embed_video")) else obj
    for name in ("id", "embed_image", "embed_video"):
        if not hasattr(extractor, name):
            raise ConfigurationError(f"extractor {spec!r} lacks '{name}'")
    return extractor


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    per_video: list
    aggregate: dict
    fvd: float
    extractor_id: str
    skipped: int = 0
    notes: dict = field(default_factory=dict)

    def to_json(self):
        def enc(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            if isinstance(v, list):
                return [enc(x) for x in v]
            return v
        return json.dumps(enc(asdict(self)), indent=2, sort_keys=True)

    def write(self, out):
        """Write ``<out>.json`` and ``<out>.csv`` (suffix of ``out`` ignored)."""
        base = Path(out)
        base = base.with_suffix("") if base.suffix in (".json", ".csv") else base
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".json").write_text(self.to_json())
        with open(base.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "ssim", "psnr", "lpips"])
            for row in self.per_video:
                writer.writerow([row["id"], repr(row["ssim"]), repr(row["psnr"]), repr(row["lpips"])])
        return base.with_suffix(".json"), base.with_suffix(".csv")


def video_scores(real, fake, extractor):
    if len(real) != len(fake):
        raise ContractError(f"frame counts differ: {len(real)} vs {len(fake)}")
    return {
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(real, fake)])),
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(real, fake)])),
        "lpips": float(np.mean([lpips(a, b, extractor) for a, b in zip(real, fake)])),
    }


def compute_report(ids, real_videos, fake_videos, extractor, skipped=0, notes=None):
    per_video = []
    for vid, real, fake in zip(ids, real_videos, fake_videos):
        per_video.append({"id": vid, **video_scores(real, fake, extractor)})
    aggregate = {k: float(np.mean([r[k] for r in per_video])) if per_video else math.nan
                 for k in ("ssim", "psnr", "lpips")}
    notes = dict(notes or {})
    if len(real_videos) >= 2:
        value = fvd(real_videos, fake_videos, extractor)
    else:
        value = math.nan
        notes["fvd"] = "undefined for fewer than two videos"
    return MetricReport(per_video, aggregate, value, extractor.id, skipped, notes)


def align_ground_truth(sample, n_frames=12, seed=0):
    """Pick ``n_frames`` ground-truth frames: equal counts per phase when possible, else evenly spaced."""
    if n_frames % 3 == 0:
        try:
            seq = sample_training_frames(sample, np.random.default_rng(seed), n_frames // 3)
            return seq.frames
        except InsufficientFramesError:
            pass
    idx = np.round(np.linspace(0, sample.num_frames - 1, n_frames)).astype(int)
    return [sample.ffa_frames[i] for i in idx]


def evaluate(data_root, checkpoint, extractor=None, out=None, split="test", n_frames=12,
             smoothing="centered", seed=0):
    """Generate a video for every CF image in ``split`` and score it against its ground truth."""
    from .checkpoint import file_sha256
    from .inference import load_generator, rollout, smooth_triple_average

    extractor = extractor or RandomProjectionExtractor()
    generator, header = load_generator(checkpoint)
    size = header["arch"]["image_size"]
    listed = read_manifest(data_root)["splits"].get(split, [])
    samples = load_dataset(data_root, split, target_size=size, on_malformed="skip")
    if not samples:
        raise ConfigurationError(f"split {split!r} of {data_root} has no usable samples")
    ids, reals, fakes = [], [], []
    for sample in samples:
        reals.append(align_ground_truth(sample, n_frames, seed))
        fakes.append(smooth_triple_average(rollout(sample.cf_image, n_frames, generator), smoothing))
        ids.append(sample.patient_id)
    notes = {
        "checkpoint_sha256": file_sha256(checkpoint),
        "use_knowledge_mask": header.get("config", {}).get("use_knowledge_mask"),
        "fvd_backbone": extractor.id,
        "clip_length": n_frames,
        "split": split,
    }
    report = compute_report(ids, reals, fakes, extractor, skipped=len(listed) - len(samples), notes=notes)
    if out is not None:
        report.write(out)
    return report
