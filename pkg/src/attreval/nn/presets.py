"""Desk-scale architectures.

``tinyvgg-*`` is a VGG-style stack of eight 3x3 convolutions in four blocks
with a global-average-pool + linear head. On 32x32 inputs the last spatial
layer is 4x4, on a 2x2 grid composite 8x8.
"""

from __future__ import annotations

import numpy as np

from .layers import (DTYPE, BatchNorm2d, Conv2d, GlobalAvgPool, Linear,
                     MaxPool2d, ReLU)
from .model import Model

TINYVGG_CHANNELS = (16, 16, "M", 32, 32, "M", 64, 64, "M", 64, 64)

PRESETS = ("tinyvgg-plain", "tinyvgg-bn", "tinyvgg-plain-nobias")


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def tinyvgg(num_classes=10, in_channels=3, batchnorm=False, bias=True, seed=0,
            channels=TINYVGG_CHANNELS, input_size=32):
    """Build a freshly initialised tinyvgg.

    Taps: ``mid`` is the output of the fourth conv block (after its ReLU),
    ``final`` the output of the last conv (after its ReLU).
    """
    rng = np.random.default_rng(seed)
    layers, taps = [], {}
    c_in, n_conv = in_channels, 0
    for spec in channels:
        if spec == "M":
            layers.append(MaxPool2d(2, 2))
            continue
        fan_in = c_in * 9
        w = he_uniform(rng, (spec, c_in, 3, 3), fan_in)
        b = np.zeros(spec, DTYPE) if bias and not batchnorm else None
        layers.append(Conv2d(w, b, stride=1, padding=1))
        if batchnorm:
            layers.append(BatchNorm2d(np.ones(spec), np.zeros(spec), np.zeros(spec), np.ones(spec)))
        layers.append(ReLU())
        n_conv += 1
        if n_conv == 4:
            taps["mid"] = len(layers)
        c_in = spec
    head_start = len(layers)
    taps["final"] = head_start
    layers.append(GlobalAvgPool())
    w = he_uniform(rng, (num_classes, c_in), c_in)
    layers.append(Linear(w, np.zeros(num_classes, DTYPE) if bias else None))
    return Model(layers, taps, head_start, (in_channels, input_size, input_size))


def build_preset(name, num_classes=10, seed=0, input_size=32):
    if name == "tinyvgg-plain":
        return tinyvgg(num_classes, batchnorm=False, bias=True, seed=seed, input_size=input_size)
    if name == "tinyvgg-bn":
        return tinyvgg(num_classes, batchnorm=True, bias=True, seed=seed, input_size=input_size)
    if name == "tinyvgg-plain-nobias":
        return tinyvgg(num_classes, batchnorm=False, bias=False, seed=seed, input_size=input_size)
    raise KeyError(f"unknown architecture {name!r}; choose from {PRESETS}")
