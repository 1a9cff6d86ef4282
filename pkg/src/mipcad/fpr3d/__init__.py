"""Second-stage false positive reduction on 3-D patches."""

from .archi import ARCHITECTURES, ArchiSpec, PatchClassifier, archi2, archi3, layer_census
from .patches import Patch3D, augment_3d, extract_patch, rotate_patch
from .train import (
    FprModel,
    TrainConfig3D,
    binary_cross_entropy,
    ensemble_score,
    fuse_probabilities,
    score_candidates,
    train_fpr,
)

__all__ = [
    "ARCHITECTURES",
    "ArchiSpec",
    "FprModel",
    "Patch3D",
    "PatchClassifier",
    "TrainConfig3D",
    "archi2",
    "archi3",
    "augment_3d",
    "binary_cross_entropy",
    "ensemble_score",
    "extract_patch",
    "fuse_probabilities",
    "layer_census",
    "rotate_patch",
    "score_candidates",
    "train_fpr",
]
