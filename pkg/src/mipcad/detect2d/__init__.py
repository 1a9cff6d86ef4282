"""Per-slab-thickness 2-D nodule detectors."""

from .labels import apply_transform_2d, augment_2d, rasterize_labels
from .losses import dice_loss, dice_score, soft_dice_loss
from .train import DetectorModel, TrainConfig2D, predict_images, predict_maps, train_detector
from .unet import UNet2D, UNetSpec, conv_census, he_init_, he_std

__all__ = [
    "DetectorModel",
    "TrainConfig2D",
    "UNet2D",
    "UNetSpec",
    "apply_transform_2d",
    "augment_2d",
    "conv_census",
    "dice_loss",
    "dice_score",
    "he_init_",
    "he_std",
    "predict_images",
    "predict_maps",
    "rasterize_labels",
    "soft_dice_loss",
    "train_detector",
]
