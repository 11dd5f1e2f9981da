"""Minimal numpy CNN engine: layers, tracing, backprop, training, weight files."""

from .errors import (BadMagicError, ModelFormatError, NonFiniteError, ShapeError,
                     TrainingDivergedError, TruncatedFileError, VersionMismatchError)
from .layers import (DTYPE, AvgPool2d, BatchNorm2d, CellMerge, CellSplit, Conv2d, Flatten,
                     GlobalAvgPool, Layer, Linear, MaxPool2d, PointwiseLinear, RegionPool, ReLU)
from .model import (ForwardTrace, Model, backward_gradient, compose, forward,
                    merge_batchnorm, split)
from .presets import PRESETS, build_preset, tinyvgg
from .serialization import load_model, model_from_bytes, model_hash, model_to_bytes, save_model
from .training import accuracy, cross_entropy, predict_logits, softmax, train_sgd

__all__ = [
    "DTYPE", "AvgPool2d", "BatchNorm2d", "CellMerge", "CellSplit", "Conv2d", "Flatten",
    "GlobalAvgPool", "Layer", "Linear", "MaxPool2d", "PointwiseLinear", "RegionPool", "ReLU",
    "ForwardTrace", "Model", "backward_gradient", "compose", "forward", "merge_batchnorm",
    "split", "PRESETS", "build_preset", "tinyvgg", "load_model", "model_from_bytes",
    "model_hash", "model_to_bytes", "save_model", "accuracy", "cross_entropy",
    "predict_logits", "softmax", "train_sgd", "BadMagicError", "ModelFormatError",
    "NonFiniteError", "ShapeError", "TrainingDivergedError", "TruncatedFileError",
    "VersionMismatchError",
]
