"""Desk-scale decoupled video segmentation: segment, track, refine.

A synthetic-scene mock segmenter feeds a trainable referring tracker and
temporal refiner built on a minimal float64 autodiff core, with denoising
training, contrastive learning, Hungarian matching, staged losses, and
video metrics.
"""

from .autodiff import Tensor
from .config import TrainConfig
from .matching import Assignment, LossWeights, hungarian
from .metrics import MetricReport, tube_iou
from .noiser import NoiseConfig
from .refiner import TemporalRefiner
from .scene import ObjectQuerySet, SceneConfig, SyntheticVideo, generate_video, stub_segment
from .tracker import ReferringTracker

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "TrainConfig",
    "Assignment",
    "LossWeights",
    "hungarian",
    "MetricReport",
    "tube_iou",
    "NoiseConfig",
    "TemporalRefiner",
    "ObjectQuerySet",
    "SceneConfig",
    "SyntheticVideo",
    "generate_video",
    "stub_segment",
    "ReferringTracker",
    "__version__",
]
