"""Autoregressive angiography-video generation from a single colour fundus photograph."""

from .data import PairedSample, SyntheticSceneParams, TrainingSequence, load_dataset, synthesize_pair
from .inference import generate_video, rollout, smooth_triple_average
from .losses import LossBreakdown, LossWeights
from .mask import KnowledgeMask, compute_mask, downsample_mask, mask_coverage
from .trainer import TrainConfig, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "KnowledgeMask",
    "LossBreakdown",
    "LossWeights",
    "PairedSample",
    "SyntheticSceneParams",
    "TrainConfig",
    "TrainingSequence",
    "compute_mask",
    "downsample_mask",
    "fit",
    "generate_video",
    "load_dataset",
    "mask_coverage",
    "rollout",
    "smooth_triple_average",
    "synthesize_pair",
    "train_step",
]
