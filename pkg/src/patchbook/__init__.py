"""patchbook: patch-codebook anomaly detection for 3D point clouds.

Pipeline: generate or load normal shapes, build a multi-scale translation-
invariant patch-feature codebook, train a point-offset regressor with
rotary-embedded linear cross-attention and discrepancy-gated modulation on
pseudo-anomalous augmentations, then score and evaluate with AUC-ROC/AUC-PR.
"""

from .geometry import CanonicalTransform, PointCloud, SpatialKey
from .patchify import Patch, PatchConfig, PatchSet
from .augment import AugmentationSpec, AugmentedSample
from .codebook import Codebook, CodebookEntry
from .config import PipelineConfig, preset_pipeline
from .model import ModelParams, RopeConfig
from .training import LossWeights, TrainConfig
from .evaluation import AnomalyScores, MetricsReport, TestSample

__version__ = "0.1.0"

__all__ = [
    "AnomalyScores",
    "AugmentationSpec",
    "AugmentedSample",
    "CanonicalTransform",
    "Codebook",
    "CodebookEntry",
    "LossWeights",
    "MetricsReport",
    "ModelParams",
    "Patch",
    "PatchConfig",
    "PatchSet",
    "PipelineConfig",
    "PointCloud",
    "RopeConfig",
    "SpatialKey",
    "TestSample",
    "TrainConfig",
    "preset_pipeline",
]
