"""Nested multiresolution U-Net with partial-label Dice training."""

from .types import (
    UNLABELED,
    ClassTable,
    LabelMap,
    LossConfig,
    ModelConfig,
    Mosaic,
    ProbabilityMap,
    Pyramid,
    one_hot_expand,
)
from .model import MUNet, UNet, build_munet, parameter_count
from .loss import loss_gradient, multilevel_loss, selective_dice
from .inference import predict_mosaic, window_grid
from .metrics import confusion_matrix, per_class_metrics

__version__ = "0.1.0"
