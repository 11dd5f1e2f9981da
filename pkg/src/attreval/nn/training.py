"""Minibatch SGD with cross-entropy loss."""

from __future__ import annotations

import logging

import numpy as np

from .errors import TrainingDivergedError
from .layers import DTYPE, BatchNorm2d, Layer
from .model import Model

log = logging.getLogger(__name__)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits.astype(np.float64))
    n = logits.shape[0]
    loss = -np.log(np.clip(p[np.arange(n), labels], 1e-300, None)).mean()
    g = p
    g[np.arange(n), labels] -= 1
    return float(loss), (g / n).astype(logits.dtype)


def _train_forward(model, x):
    acts, ctxs = [x], []
    for layer in model.layers:
        if isinstance(layer, BatchNorm2d):
            y, ctx = layer.forward_train(acts[-1])
        else:
            y, ctx = layer.forward(acts[-1])
        acts.append(y)
        ctxs.append(ctx)
    return acts, ctxs


def _train_backward(model, ctxs, g):
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, BatchNorm2d):
            g, pg = layer.backward_train(ctxs[i], g)
        else:
            pg = layer.param_grads(ctxs[i], g)
            g = layer.backward(ctxs[i], g) if i > 0 else None
        for name, value in pg.items():
            grads[(i, name)] = value
    return grads


def _trainable(layer, name):
    return not (isinstance(layer, BatchNorm2d) and name.startswith("running"))


def train_sgd(model, images, labels, epochs=10, lr=0.05, batch_size=64, seed=0,
              momentum=0.9, weight_decay=0.0, flip=True, callback=None):
    """Train a copy of ``model``; returns ``(trained_model, train_accuracy)``.

    ``images`` is an ``(N, C, H, W)`` array, ``labels`` integer classes.
    Shuffling and horizontal flips are drawn from ``seed``; BatchNorm layers
    use batch statistics and update their running averages. Accuracy is
    measured on the unflipped training set in inference mode at the end.
    """
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    rng = np.random.default_rng(seed)
    layers = [layer.with_params(**{k: v.copy() for k, v in layer.params().items()})
              for layer in model.layers]
    work = Model(layers, model.taps, model.head_start, model.input_shape, model.meta)
    velocity = {}
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if flip else np.zeros(n, bool)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = images[idx]
            fb = flips[idx]
            if fb.any():
                xb = xb.copy()
                xb[fb] = xb[fb][..., ::-1]
            acts, ctxs = _train_forward(work, xb)
            loss, g = cross_entropy(acts[-1], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} in epoch {epoch}")
            total += loss * len(idx)
            grads = _train_backward(work, ctxs, g)
            for (i, name), gp in grads.items():
                layer = work.layers[i]
                if not _trainable(layer, name):
                    continue
                param = getattr(layer, name)
                if weight_decay and name == "weight":
                    gp = gp + weight_decay * param
                v = velocity.get((i, name))
                v = gp if v is None else momentum * v + gp
                velocity[(i, name)] = v
                param -= (lr * v).astype(param.dtype)
            for i, layer in enumerate(work.layers):
                if isinstance(layer, BatchNorm2d):
                    layer.running_mean, layer.running_var = layer.updated_running_stats(ctxs[i])
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingDivergedError(f"loss became {mean_loss} in epoch {epoch}")
        log.info("epoch %d loss %.4f", epoch, mean_loss)
        if callback is not None:
            callback(epoch, mean_loss)
    acc = accuracy(work, images, labels)
    return work, acc


def predict_logits(model, images, batch_size=256):
    images = np.asarray(images, dtype=DTYPE)
    out = [model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), DTYPE)


def accuracy(model, images, labels):
    if len(images) == 0:
        return 0.0
    pred = predict_logits(model, images).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


__all__ = ["train_sgd", "cross_entropy", "softmax", "predict_logits", "accuracy", "Layer"]
