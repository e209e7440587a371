"""Paired colour-fundus / angiography data: loading, synthesis, sampling, augmentation.

Arrays are float32 numpy arrays in [0, 1]. Colour-fundus (CF) images are
``(H, W, 3)``, angiography (FFA) frames are single-channel ``(H, W)``.

On-disk layout::

    root/manifest.json
    root/<patient_id>/cf.png
    root/<patient_id>/ffa/<idx>_<seconds>.png
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, ContractError, InsufficientFramesError, MalformedSampleError

logger = logging.getLogger(__name__)

PHASES = ("vascular", "venous", "late")
# Upper bounds (seconds after injection) of the vascular and venous phases.
DEFAULT_PHASE_BOUNDARIES = (30.0, 180.0)
DEFAULT_SPLIT_RATIOS = (0.7, 0.15, 0.15)
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "fundus2video-dataset"

_FRAME_NAME = re.compile(r"^(\d+)_([0-9]+(?:\.[0-9]+)?)\.png$")


def phase_for_seconds(seconds, boundaries=DEFAULT_PHASE_BOUNDARIES):
    vascular_end, venous_end = boundaries
    if seconds <= vascular_end:
        return "vascular"
    if seconds <= venous_end:
        return "venous"
    return "late"


def luminance(image):
    """Rec. 601 luma of an ``(H, W, 3)`` array; 2-D input is returned as is."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 1:
        return image[..., 0]
    if image.ndim == 3 and image.shape[-1] == 3:
        return (0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]).astype(image.dtype)
    raise ContractError(f"cannot take luminance of array with shape {image.shape}")


@dataclass
class PairedSample:
    cf_image: np.ndarray
    ffa_frames: list
    phase_labels: list
    patient_id: str
    timestamps: list | None = None

    def __post_init__(self):
        if len(self.ffa_frames) == 0:
            raise MalformedSampleError(f"patient {self.patient_id!r} has no FFA frames")
        if len(self.phase_labels) != len(self.ffa_frames):
            raise MalformedSampleError(
                f"patient {self.patient_id!r}: {len(self.phase_labels)} phase labels "
                f"for {len(self.ffa_frames)} frames"
            )
        shape = self.ffa_frames[0].shape
        if any(f.shape != shape for f in self.ffa_frames):
            raise MalformedSampleError(f"patient {self.patient_id!r}: FFA frames differ in shape")
        order = [PHASES.index(p) if p in PHASES else -1 for p in self.phase_labels]
        if min(order) < 0:
            raise MalformedSampleError(f"patient {self.patient_id!r}: unknown phase label")
        if any(b < a for a, b in zip(order, order[1:])):
            raise MalformedSampleError(f"patient {self.patient_id!r}: phase labels not in temporal order")

    @property
    def num_frames(self):
        return len(self.ffa_frames)


@dataclass(frozen=True)
class GeometricTransform:
    """Geometric augmentation actually applied to one array.

    ``crop`` is ``(top, left, height, width)`` in input pixels, ``scale`` the
    zoom factor applied after cropping. ``None`` means the step was skipped.
    """

    crop: tuple | None = None
    scale: float | None = None


@dataclass
class TrainingSequence:
    cf_image: np.ndarray
    frames: list
    source_indices: list
    # One record per array: index 0 is the CF image, then one per frame.
    transforms: tuple = ()

    def __post_init__(self):
        if len(self.frames) != len(self.source_indices):
            raise ContractError("frames and source_indices differ in length")
        if any(b <= a for a, b in zip(self.source_indices, self.source_indices[1:])):
            raise ContractError("source_indices must be strictly increasing")


@dataclass
class Lesion:
    center: tuple  # (row, col) in pixels
    radius: float
    leak_rate: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractError("lesion radius must be > 0")
        if not 0.0 <= self.leak_rate <= 1.0:
            raise ContractError("lesion leak_rate must be in [0, 1]")


@dataclass
class SyntheticSceneParams:
    vessel_count: int = 8
    lesion_regions: list = field(default_factory=list)
    dye_front_speed: float = 1.0
    noise_level: float = 0.0
    seed: int = 0
    image_size: int = 64
    frames_per_phase: tuple = (6, 6, 6)
    patient_id: str | None = None

    def __post_init__(self):
        if self.vessel_count < 0:
            raise ContractError("vessel_count must be >= 0")
        if self.dye_front_speed <= 0:
            raise ContractError("dye_front_speed must be > 0")
        if self.noise_level < 0:
            raise ContractError("noise_level must be >= 0")
        if self.image_size < 8:
            raise ContractError("image_size must be >= 8")
        self.lesion_regions = [l if isinstance(l, Lesion) else Lesion(*l) for l in self.lesion_regions]


# --------------------------------------------------------------------------
# preprocessing


def _to_unit_float(image):
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.integer):
        peak = 65535.0 if image.dtype.itemsize > 1 else 255.0
        return image.astype(np.float32) / peak
    image = image.astype(np.float32)
    if not np.all(np.isfinite(image)):
        raise MalformedSampleError("image contains non-finite pixel values")
    if image.size and image.max() > 1.0:
        image = image / 255.0
    return image


def _resize(image, size):
    """Bilinear (antialiased) resize of an ``(H, W)`` or ``(H, W, C)`` array."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    t = t[None, None] if t.ndim == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)[0]
    out = out[0] if image.ndim == 2 else out.permute(1, 2, 0)
    return out.numpy()


def center_crop_square(image):
    h, w = image.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return image[top : top + side, left : left + side]


def preprocess(image, target_size=512):
    """Scale to [0, 1], centre-crop to square and resize to ``target_size``."""
    image = np.asarray(image)
    if image.ndim not in (2, 3) or min(image.shape[:2]) < 8:
        raise ContractError(f"image must be at least 8 px per side, got shape {image.shape}")
    if np.issubdtype(image.dtype, np.floating) and not np.all(np.isfinite(image)):
        raise MalformedSampleError("image contains non-finite pixel values")
    image = _to_unit_float(image)
    image = center_crop_square(image)
    image = _resize(image, (target_size, target_size))
    return np.clip(image, 0.0, 1.0)


# --------------------------------------------------------------------------
# sampling and augmentation


def sample_training_frames(sample, rng, per_phase=4):
    """Pick ``per_phase`` frames from each phase, keeping temporal order."""
    chosen = []
    for phase in PHASES:
        idx = [i for i, p in enumerate(sample.phase_labels) if p == phase]
        if len(idx) < per_phase:
            raise InsufficientFramesError(phase, len(idx), per_phase)
        chosen.extend(sorted(int(i) for i in rng.choice(idx, size=per_phase, replace=False)))
    return TrainingSequence(
        cf_image=sample.cf_image,
        frames=[sample.ffa_frames[i] for i in chosen],
        source_indices=chosen,
    )


@dataclass
class AugmentConfig:
    crop_prob: float = 0.5
    crop_min: float = 0.8
    scale_prob: float = 0.5
    scale_range: tuple = (0.9, 1.1)
    color_prob: float = 0.5
    color_jitter: float = 0.1  # +-10% brightness / contrast / saturation

    @classmethod
    def disabled(cls):
        return cls(crop_prob=0.0, scale_prob=0.0, color_prob=0.0)


def _apply_geometric(image, crop, scale):
    h, w = image.shape[:2]
    applied_crop = None
    if crop is not None:
        top, left, ch, cw = crop
        if ch <= h and cw <= w and top + ch <= h and left + cw <= w:
            image = _resize(image[top : top + ch, left : left + cw], (h, w))
            applied_crop = (top, left, ch, cw)
    applied_scale = None
    if scale is not None:
        sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        zoomed = _resize(image, (sh, sw))
        out = np.zeros_like(image)
        # centre-crop when zoomed in, zero-pad when zoomed out
        src_t, src_l = max(0, (sh - h) // 2), max(0, (sw - w) // 2)
        dst_t, dst_l = max(0, (h - sh) // 2), max(0, (w - sw) // 2)
        ph, pw = min(h, sh), min(w, sw)
        out[dst_t : dst_t + ph, dst_l : dst_l + pw] = zoomed[src_t : src_t + ph, src_l : src_l + pw]
        image = out
        applied_scale = float(scale)
    return image, GeometricTransform(crop=applied_crop, scale=applied_scale)


def _color_jitter(image, brightness, contrast, saturation):
    image = image * brightness
    mean = image.mean()
    image = (image - mean) * contrast + mean
    lum = luminance(image)[..., None]
    image = lum + (image - lum) * saturation
    return image


def augment(seq, rng, config=None):
    """Random crop/scale shared by every array, colour jitter on the CF image only."""
    config = config or AugmentConfig()
    h, w = seq.frames[0].shape[:2]
    crop = scale = None
    if rng.random() < config.crop_prob:
        frac = rng.uniform(config.crop_min, 1.0)
        ch, cw = int(round(frac * h)), int(round(frac * w))
        if ch <= h and cw <= w:
            crop = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)
    if rng.random() < config.scale_prob:
        scale = float(rng.uniform(*config.scale_range))

    cf, cf_record = _apply_geometric(seq.cf_image, crop, scale)
    frames, records = [], [cf_record]
    for frame in seq.frames:
        out, rec = _apply_geometric(frame, crop, scale)
        frames.append(np.clip(out, 0.0, 1.0).astype(np.float32))
        records.append(rec)

    if rng.random() < config.color_prob:
        j = config.color_jitter
        b, c, s = rng.uniform(1 - j, 1 + j, size=3)
        cf = _color_jitter(cf, b, c, s)
    cf = np.clip(cf, 0.0, 1.0).astype(np.float32)
    return TrainingSequence(cf_image=cf, frames=frames, source_indices=list(seq.source_indices),
                            transforms=tuple(records))


# --------------------------------------------------------------------------
# synthetic data

_VESSEL_LEVEL = 0.4  # steady-state vessel brightness in FFA
_VESSEL_EARLY = 0.6  # fraction of it already visible in the first (arterial) frame
_LEAK_LEVEL = 0.6  # lesion brightening at full leakage
_LESION_EDGE_POWER = 8


def _frame_times(frames_per_phase):
    nv, nven, nl = frames_per_phase
    return np.concatenate([
        np.linspace(5.0, 28.0, nv),
        np.linspace(35.0, 175.0, nven),
        np.linspace(200.0, 600.0, nl),
    ]).round(1)


def _smooth_noise(rng, n, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=sigma, mode="wrap")
    return field / (np.abs(field).max() + 1e-12)


def _vessel_tree(rng, n, disc_center, count):
    """Vessel strength in [0, 1] and normalised path distance from the disc."""
    strength = np.zeros((n, n))
    path = np.ones((n, n))
    for _ in range(count):
        theta = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-1.5, 1.5)
        length = rng.uniform(0.5, 0.9) * n
        width = max(0.6, rng.uniform(0.008, 0.016) * n)
        s = np.linspace(0.0, 1.0, 4 * n)
        heading = theta + bend * s
        step = length / len(s)
        rows = disc_center[0] + np.cumsum(np.sin(heading) * step)
        cols = disc_center[1] + np.cumsum(np.cos(heading) * step)
        r_i, c_i = np.round(rows).astype(int), np.round(cols).astype(int)
        keep = (r_i >= 0) & (r_i < n) & (c_i >= 0) & (c_i < n)
        if not keep.any():
            continue
        seed_img = np.ones((n, n), dtype=bool)
        s_img = np.zeros((n, n))
        # first visit wins so the path distance is the smallest along the curve
        for r, c, sv in zip(r_i[keep][::-1], c_i[keep][::-1], s[keep][::-1]):
            seed_img[r, c] = False
            s_img[r, c] = sv
        dist, (ir, ic) = ndimage.distance_transform_edt(seed_img, return_indices=True)
        this = np.clip(1.0 - dist / width, 0.0, 1.0)
        better = this > strength
        strength = np.where(better, this, strength)
        path = np.where(better, s_img[ir, ic], path)
    return strength, path


def _lesion_fields(n, lesions):
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    leak = np.zeros((n, n))
    inside = np.zeros((n, n), dtype=bool)
    for les in lesions:
        d = np.hypot(rows - les.center[0], cols - les.center[1]) / les.radius
        disk = d < 1.0
        profile = np.where(disk, 1.0 - d ** _LESION_EDGE_POWER, 0.0)
        leak = np.maximum(leak, les.leak_rate * profile)
        inside |= disk
    return leak, inside


def lesion_disk(shape, lesions):
    """Boolean map of the planted lesion disks (``distance < radius``)."""
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    out = np.zeros(shape, dtype=bool)
    for les in lesions:
        out |= np.hypot(rows - les.center[0], cols - les.center[1]) < les.radius
    return out


def synthesize_pair(params):
    """Procedural fundus photograph plus an angiography series.

    The FFA intensity model is closed form: a static background and optic
    disc, vessels that brighten from an arterial-phase level to saturation as
    the dye front passes, and lesions that brighten linearly in time by
    ``leak_rate * 0.6 * (1 - (d/r)**8)``. The last-minus-first difference is
    therefore at most 0.16 on vessels and peaks at ``0.6 * leak_rate`` at each
    lesion centre.
    """
    rng = np.random.default_rng(params.seed)
    n = params.image_size
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    rr = np.hypot(rows - n / 2 + 0.5, cols - n / 2 + 0.5) / (n / 2)
    fov = (rr <= 1.0).astype(np.float64)

    disc_center = (n * (0.5 + rng.uniform(-0.04, 0.04)), n * (0.3 + rng.uniform(-0.04, 0.04)))
    disc_r = 0.08 * n
    disc = np.clip(1.0 - np.hypot(rows - disc_center[0], cols - disc_center[1]) / disc_r, 0.0, 1.0) ** 0.5
    texture = _smooth_noise(rng, n, sigma=max(1.0, n / 16))
    strength, path = _vessel_tree(rng, n, disc_center, params.vessel_count)

    leak, inside = _lesion_fields(n, params.lesion_regions)
    strength = np.where(inside, 0.0, strength)

    times = _frame_times(params.frames_per_phase)
    t0, t1 = times[0], times[-1]
    background = (0.12 + 0.04 * texture + 0.25 * disc) * fov
    frames = []
    for t in times:
        front = params.dye_front_speed * t / 30.0
        fill = np.clip((front - path) / 0.25, 0.0, 1.0)
        vessels = strength * _VESSEL_LEVEL * (_VESSEL_EARLY + (1 - _VESSEL_EARLY) * fill)
        progress = (t - t0) / (t1 - t0) if t1 > t0 else 0.0
        frame = background + vessels * fov + _LEAK_LEVEL * leak * progress * fov
        if params.noise_level > 0:
            frame = frame + params.noise_level * rng.standard_normal((n, n))
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))

    vignette = np.clip(1.0 - 0.35 * rr ** 2, 0.0, 1.0)
    base = np.stack([0.75, 0.35, 0.15])[None, None, :] * (vignette * (1 + 0.08 * texture))[..., None]
    cf = base + np.array([0.2, 0.35, 0.2]) * disc[..., None]
    cf = cf * (1.0 - np.array([0.15, 0.45, 0.45]) * strength[..., None])
    cf = cf + np.array([0.12, 0.22, 0.05]) * (leak > 0)[..., None] * np.clip(leak, 0.3, 1.0)[..., None]
    if params.noise_level > 0:
        cf = cf + params.noise_level * rng.standard_normal(cf.shape)
    cf = np.clip(cf * fov[..., None], 0.0, 1.0).astype(np.float32)

    labels = [phase_for_seconds(t) for t in times]
    pid = params.patient_id or f"synthetic-{params.seed}"
    return PairedSample(cf_image=cf, ffa_frames=frames, phase_labels=labels, patient_id=pid,
                        timestamps=[float(t) for t in times])


def random_scene_params(seed, image_size=64, frames_per_phase=(6, 6, 6), n_lesions=1,
                        noise_level=0.0, vessel_count=None, patient_id=None):
    """Draw a plausible scene: lesions inside the field of view and away from the disc."""
    rng = np.random.default_rng([seed, 7919])
    n = image_size
    lesions = []
    for _ in range(n_lesions):
        radius = rng.uniform(0.07, 0.12) * n
        # temporal half of the image, clear of the disc on the nasal side
        center = (rng.uniform(0.3, 0.7) * n, rng.uniform(0.55, 0.75) * n)
        lesions.append(Lesion(center=(float(np.round(center[0])), float(np.round(center[1]))),
                              radius=float(radius), leak_rate=float(rng.uniform(0.7, 1.0))))
    return SyntheticSceneParams(
        vessel_count=int(rng.integers(4, 10)) if vessel_count is None else vessel_count,
        lesion_regions=lesions,
        dye_front_speed=float(rng.uniform(0.8, 1.5)),
        noise_level=noise_level,
        seed=seed,
        image_size=image_size,
        frames_per_phase=tuple(frames_per_phase),
        patient_id=patient_id,
    )


# --------------------------------------------------------------------------
# dataset I/O


def split_patients(patient_ids, seed=0, ratios=DEFAULT_SPLIT_RATIOS):
    """Patient-level split: ``ratios[0]`` for training, the rest shared evenly."""
    ids = sorted(patient_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(ratios[0] * len(ids)))
    n_val = (len(ids) - n_train) // 2
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train : n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val :]),
    }


def _to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(samples, root, split_seed=0, splits=None, boundaries=DEFAULT_PHASE_BOUNDARIES):
    """Write samples in the on-disk layout and return the manifest dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = splits or split_patients([s.patient_id for s in samples], seed=split_seed)
    patients = {}
    for sample in sorted(samples, key=lambda s: s.patient_id):
        pdir = root / sample.patient_id
        (pdir / "ffa").mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_uint8(sample.cf_image), mode="RGB").save(pdir / "cf.png")
        times = sample.timestamps or [float(i) for i in range(sample.num_frames)]
        entries = []
        for i, (frame, t) in enumerate(zip(sample.ffa_frames, times)):
            name = f"{i:03d}_{t:.1f}.png"
            Image.fromarray(_to_uint8(frame), mode="L").save(pdir / "ffa" / name)
            entries.append({"file": f"{sample.patient_id}/ffa/{name}", "seconds": float(t)})
        patients[sample.patient_id] = {"cf": f"{sample.patient_id}/cf.png", "frames": entries}
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "phase_boundaries_s": {"vascular": boundaries[0], "venous": boundaries[1]},
        "splits": {k: list(splits.get(k, [])) for k in SPLITS},
        "patients": patients,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(root):
    root = Path(root)
    path = root / MANIFEST_NAME
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    if not path.is_file():
        raise ConfigurationError(f"no {MANIFEST_NAME} in dataset root {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    splits = manifest.get("splits")
    if not isinstance(splits, dict):
        raise ConfigurationError(f"{path} has no 'splits' mapping")
    seen = {}
    for name, ids in splits.items():
        for pid in ids:
            if pid in seen:
                raise ConfigurationError(f"patient {pid!r} appears in splits {seen[pid]!r} and {name!r}")
            seen[pid] = name
    return manifest


def _frame_entries(root, pid, info):
    if info.get("frames") is not None:
        return [(root / e["file"], float(e["seconds"])) for e in info["frames"]]
    found = []
    ffa_dir = root / pid / "ffa"
    for p in sorted(ffa_dir.glob("*.png")) if ffa_dir.is_dir() else []:
        m = _FRAME_NAME.match(p.name)
        if m:
            found.append((int(m.group(1)), p, float(m.group(2))))
    return [(p, t) for _, p, t in sorted(found)]


def load_patient(root, pid, info, target_size=512, boundaries=DEFAULT_PHASE_BOUNDARIES):
    root = Path(root)
    entries = _frame_entries(root, pid, info)
    if not entries:
        raise MalformedSampleError(f"patient {pid!r} has no FFA frames")
    cf_path = root / info.get("cf", f"{pid}/cf.png")
    try:
        cf = preprocess(np.asarray(Image.open(cf_path).convert("RGB")), target_size)
        frames = [preprocess(np.asarray(Image.open(p).convert("L")), target_size) for p, _ in entries]
    except FileNotFoundError as exc:
        raise MalformedSampleError(f"patient {pid!r}: missing image {exc.filename}") from exc
    times = [t for _, t in entries]
    if any(b < a for a, b in zip(times, times[1:])):
        raise MalformedSampleError(f"patient {pid!r}: frame timestamps not in order")
    labels = [phase_for_seconds(t, boundaries) for t in times]
    return PairedSample(cf_image=cf, ffa_frames=frames, phase_labels=labels, patient_id=pid, timestamps=times)


def load_dataset(root, split, target_size=512, on_malformed="raise"):
    """Load one split, ordered by patient id.

    With ``on_malformed="skip"`` broken patients are logged and dropped
    instead of raising :class:`MalformedSampleError`.
    """
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    manifest = read_manifest(root)
    b = manifest.get("phase_boundaries_s", {})
    boundaries = (float(b.get("vascular", DEFAULT_PHASE_BOUNDARIES[0])),
                  float(b.get("venous", DEFAULT_PHASE_BOUNDARIES[1])))
    patients = manifest.get("patients", {})
    samples = []
    for pid in sorted(manifest["splits"].get(split, [])):
        try:
            samples.append(load_patient(root, pid, patients.get(pid, {}), target_size, boundaries))
        except MalformedSampleError:
            if on_malformed != "skip":
                raise
            logger.warning("skipping malformed patient %s", pid)
    return samples


def synthesize_dataset(root, n_patients, frames_per_phase=(4, 4, 4), image_size=64, seed=0,
                       noise_level=0.0, split_seed=None):
    """Synthesise ``n_patients`` scenes and write them in the dataset layout."""
    samples = []
    for i in range(n_patients):
        params = random_scene_params(seed * 100003 + i, image_size=image_size,
                                     frames_per_phase=frames_per_phase, noise_level=noise_level,
                                     patient_id=f"P{i:04d}")
        samples.append(synthesize_pair(params))
    return write_dataset(samples, root, split_seed=seed if split_seed is None else split_seed)


def frames_per_phase_for_total(total):
    """Split a total frame count over the three phases as evenly as possible."""
    if total < 3:
        raise ContractError("need at least 3 frames (one per phase)")
    base, extra = divmod(total, 3)
    return tuple(base + (1 if i < extra else 0) for i in range(3))
