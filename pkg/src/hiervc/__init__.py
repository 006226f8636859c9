"""Hierarchical VAE voice conversion on log-mel spectrograms.

The latent hierarchy is split at a configurable level: levels up to the
split carry speaker-invariant content (their priors never see the speaker),
levels past it are speaker-conditioned.  Conversion infers the invariant
levels from the source speech and completes the rest from the
target-conditioned prior.
"""

from .dataset import DatasetManifest, SpeakerVocab, build_dataset, load_manifest
from .features import (
    MelParams,
    MelSegment,
    MelUtterance,
    Normalization,
    concat_segments,
    extract_mel,
    segment_utterance,
)
from .model import (
    DiagonalGaussian,
    LatentHierarchy,
    ModelConfig,
    SplitHierarchicalVAE,
    build_model,
    sample_gaussian,
)
from .objective import ObjectiveBreakdown, RDPoint, elbo_beta, kl_gaussian, rd_evaluate
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DatasetManifest",
    "DiagonalGaussian",
    "LatentHierarchy",
    "MelParams",
    "MelSegment",
    "MelUtterance",
    "ModelConfig",
    "Normalization",
    "ObjectiveBreakdown",
    "RDPoint",
    "SpeakerVocab",
    "SplitHierarchicalVAE",
    "TrainConfig",
    "build_dataset",
    "build_model",
    "concat_segments",
    "elbo_beta",
    "extract_mel",
    "kl_gaussian",
    "load_checkpoint",
    "load_manifest",
    "rd_evaluate",
    "sample_gaussian",
    "save_checkpoint",
    "segment_utterance",
    "train",
]
