"""Chip-wise defect segmentation of LED wafer photoluminescence images.

A numpy implementation of a fully convolutional network (VGG-style encoder,
bilinear-resize decoder, skip connections, residual shortcuts) together with
a synthetic wafer generator, weighted-loss training and segmentation metrics.
"""

from .evaluation import ConfusionMatrix, MetricsReport, confusion, ensemble_predict, metrics
from .model import Model, ModelConfig, build_model, predict_classes
from .pipeline import PreprocessConfig, augment_rotations, preprocess, shuffle_epoch
from .tensor import Tensor, no_grad
from .training import TrainConfig, train, weighted_cross_entropy
from .wafergen import WaferGenConfig, WaferSample, generate_dataset, generate_wafer

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix", "MetricsReport", "Model", "ModelConfig", "PreprocessConfig", "Tensor",
    "TrainConfig", "WaferGenConfig", "WaferSample", "augment_rotations", "build_model", "confusion",
    "ensemble_predict", "generate_dataset", "generate_wafer", "metrics", "no_grad", "predict_classes",
    "preprocess", "shuffle_epoch", "train", "weighted_cross_entropy",
]
