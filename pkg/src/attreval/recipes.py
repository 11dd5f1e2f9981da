"""Default training recipes for the preset architectures.

The values were chosen by short sweeps on the synthetic task: the BN-free
networks need a small step size and batch, BatchNorm tolerates a larger one.
"""

from __future__ import annotations

from .data import gen_synthetic, stack
from .nn.presets import build_preset
from .nn.training import accuracy, train_sgd

RECIPES = {
    "tinyvgg-plain": {"epochs": 8, "lr": 0.003, "batch_size": 16},
    "tinyvgg-plain-nobias": {"epochs": 8, "lr": 0.003, "batch_size": 16},
    "tinyvgg-bn": {"epochs": 4, "lr": 0.05, "batch_size": 32},
}

# training and held-out images come from disjoint index ranges of one seed
TEST_START = 1_000_000
POOL_START = 2_000_000


def recipe(arch):
    try:
        return dict(RECIPES[arch])
    except KeyError:
        raise KeyError(f"no training recipe for {arch!r}; choose from {sorted(RECIPES)}") from None


def synthetic_split(train_count=5000, test_count=1000, seed=0):
    train = gen_synthetic(train_count, seed=seed)
    test = gen_synthetic(test_count, seed=seed, start=TEST_START)
    return train, test


def train_preset(arch, seed=0, train_count=5000, test_count=1000, data_seed=0, **overrides):
    """Train ``arch`` on the synthetic task; returns ``(model, metrics)``."""
    params = recipe(arch)
    params.update(overrides)
    train, test = synthetic_split(train_count, test_count, data_seed)
    x, y = stack(train)
    model, train_acc = train_sgd(build_preset(arch, seed=seed), x, y, seed=seed, **params)
    xt, yt = stack(test)
    metrics = {"arch": arch, "seed": seed, "train_accuracy": train_acc,
               "test_accuracy": accuracy(model, xt, yt), **params}
    return model, metrics


__all__ = ["RECIPES", "recipe", "synthetic_split", "train_preset", "TEST_START", "POOL_START"]
