"""Sequential model container, forward tracing and exact backpropagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError
from .layers import DTYPE, BatchNorm2d, Conv2d, Layer, Linear, ReLU

# Tap indices count layer boundaries: tap ``t`` is the activation fed into
# ``layers[t]`` (``t == len(layers)`` would be the logits).


@dataclass
class ForwardTrace:
    """Activations of one forward pass.

    ``activations[i]`` is the input of layer ``i``; the last entry holds the
    logits. ``ctxs[i]`` is whatever layer ``i`` needs for its backward.
    """

    activations: list
    ctxs: list

    @property
    def logits(self):
        return self.activations[-1]

    @property
    def input(self):
        return self.activations[0]


class Model:
    """An ordered stack of layers with named tap points.

    Parameters
    ----------
    layers : list of Layer
    taps : dict mapping tap name -> layer index; ``input`` is always 0.
    head_start : index of the first classification-head layer.
    input_shape : nominal ``(C, H, W)`` of one sample. Spatial size is not
        enforced beyond what the layers can process, so composites work.
    """

    def __init__(self, layers, taps=None, head_start=None, input_shape=None, meta=None):
        self.layers = list(layers)
        head_start = len(self.layers) if head_start is None else int(head_start)
        taps = dict(taps or {})
        taps.setdefault("input", 0)
        taps.setdefault("final", head_start)
        for name, idx in taps.items():
            if not 0 <= idx <= head_start:
                raise ValueError(f"tap {name!r}={idx} outside [0, head_start={head_start}]")
        self.taps = taps
        self.head_start = head_start
        self.input_shape = None if input_shape is None else tuple(int(s) for s in input_shape)
        self.meta = dict(meta or {})
        if self.input_shape is not None:
            self.check_shapes(self.input_shape)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        body = "\n".join(f"  [{i}] {layer!r}" for i, layer in enumerate(self.layers))
        return f"Model(taps={self.taps}, head_start={self.head_start},\n{body}\n)"

    # ------------------------------------------------------------------ shapes
    def check_shapes(self, sample_shape):
        """Propagate a sample shape through all layers without running data.

        Returns the list of per-boundary sample shapes.
        """
        shapes = [tuple(sample_shape)]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.name}): {exc}") from None
        return shapes

    def tap_index(self, tap):
        """Resolve a tap name, or an integer layer boundary, to an index."""
        if isinstance(tap, (int, np.integer)):
            idx = int(tap)
        elif isinstance(tap, str) and tap.lstrip("-").isdigit():
            idx = int(tap)
        elif tap in self.taps:
            return self.taps[tap]
        else:
            raise KeyError(f"unknown tap {tap!r}; known taps: {sorted(self.taps)}")
        if not 0 <= idx <= self.head_start:
            raise KeyError(f"tap index {idx} outside [0, {self.head_start}]")
        return idx

    @property
    def num_classes(self):
        return self.check_shapes(self.input_shape)[-1][0] if self.input_shape else None

    # ------------------------------------------------------------------ passes
    def forward(self, x, capture=True):
        """Run the model on a batch ``x``; returns a :class:`ForwardTrace`.

        With ``capture=False`` only the input and logits are retained.
        """
        x = np.asarray(x)
        if x.dtype != DTYPE and x.dtype != np.float64:
            x = x.astype(DTYPE)
        if self.layers:
            self.check_shapes(x.shape[1:])
        acts, ctxs = [x], []
        cur = x
        for layer in self.layers:
            cur, ctx = layer.forward(cur)
            if capture:
                acts.append(cur)
                ctxs.append(ctx)
        if not capture:
            acts = [x, cur]
        if not np.all(np.isfinite(acts[-1])):
            raise NonFiniteError("non-finite logits")
        return ForwardTrace(acts, ctxs)

    def __call__(self, x):
        return self.forward(x, capture=False).logits

    def backward(self, trace, seed, relu_mode="gradient", stop=0):
        """Backpropagate ``seed`` (gradient w.r.t. the logits).

        Returns ``grads`` with ``grads[i]`` = gradient w.r.t. the input of
        layer ``i`` for ``i >= stop`` (earlier entries are ``None``); the last
        entry is the seed. ``relu_mode="guided"`` applies the guided-backprop
        ReLU rule.
        """
        if len(trace.ctxs) != len(self.layers):
            raise ValueError("trace was not produced with capture=True by this model")
        grads = [None] * (len(self.layers) + 1)
        g = np.asarray(seed, dtype=trace.logits.dtype)
        grads[-1] = g
        for i in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[i]
            if relu_mode == "guided" and isinstance(layer, ReLU):
                g = layer.backward_guided(trace.ctxs[i], g)
            else:
                g = layer.backward(trace.ctxs[i], g)
            grads[i] = g
        return grads

    def target_seed(self, logits, target):
        n_out = logits.shape[1]
        target = np.broadcast_to(np.asarray(target), (logits.shape[0],))
        if np.any(target < 0) or np.any(target >= n_out):
            raise IndexError(f"target logit {target} out of range for {n_out} outputs")
        seed = np.zeros_like(logits)
        seed[np.arange(logits.shape[0]), target] = 1
        return seed

    def input_gradient(self, x, target, relu_mode="gradient"):
        """Scores ``y[:, target]`` and their gradient w.r.t. the batch ``x``."""
        trace = self.forward(x)
        seed = self.target_seed(trace.logits, target)
        grads = self.backward(trace, seed, relu_mode=relu_mode)
        t = np.broadcast_to(np.asarray(target), (trace.logits.shape[0],))
        return trace.logits[np.arange(len(t)), t], grads[0]

    # ------------------------------------------------------------------ editing
    def astype(self, dtype):
        return Model([layer.astype(dtype) for layer in self.layers], self.taps,
                     self.head_start, self.input_shape, self.meta)

    def copy(self):
        return self.astype(DTYPE)

    def split(self, at_tap):
        return split(self, at_tap)


def forward(model, x, capture=True):
    """Functional alias of :meth:`Model.forward`."""
    return model.forward(x, capture=capture)


def backward_gradient(model, trace, target_logit):
    """Gradient of ``logits[:, target_logit]`` w.r.t. every layer input."""
    seed = model.target_seed(trace.logits, target_logit)
    return model.backward(trace, seed)[:-1]


def split(model, at_tap):
    """Split into ``(f_pre, f_explain)`` with ``f_explain(f_pre(x)) == model(x)``."""
    t = model.tap_index(at_tap)
    pre_shape = None
    explain_shape = None
    if model.input_shape is not None:
        pre_shape = model.input_shape
        explain_shape = model.check_shapes(model.input_shape)[t]
    f_pre = Model(model.layers[:t], {"input": 0}, t, pre_shape)
    taps = {k: v - t for k, v in model.taps.items() if v >= t}
    taps["input"] = 0
    f_explain = Model(model.layers[t:], taps, model.head_start - t, explain_shape, model.meta)
    return f_pre, f_explain


def merge_batchnorm(model):
    """Fold every inference-mode BatchNorm into the preceding Conv2d/Linear.

    Taps that pointed at a removed BatchNorm now point at the merged layer's
    output.
    """
    if not any(isinstance(layer, BatchNorm2d) for layer in model.layers):
        return model
    new_layers, index_map = [], {}
    for i, layer in enumerate(model.layers):
        index_map[i] = len(new_layers)
        if isinstance(layer, BatchNorm2d):
            prev = new_layers[-1] if new_layers else None
            if not isinstance(prev, (Conv2d, Linear)) or \
                    not isinstance(model.layers[i - 1], (Conv2d, Linear)):
                raise ValueError(f"BatchNorm2d at layer {i} has no Conv2d/Linear predecessor")
            scale, shift = layer.scale_shift()
            w = prev.weight * scale.reshape((-1,) + (1,) * (prev.weight.ndim - 1))
            b = prev.bias if prev.bias is not None else np.zeros_like(scale)
            new_layers[-1] = prev.with_params(weight=w, bias=b * scale + shift)
            continue
        new_layers.append(layer)
    index_map[len(model.layers)] = len(new_layers)
    taps = {k: index_map[v] for k, v in model.taps.items()}
    return Model(new_layers, taps, index_map[model.head_start], model.input_shape, model.meta)


def compose(*models):
    """Concatenate models (the inverse of :func:`split`)."""
    layers = [layer for m in models for layer in m.layers]
    last = models[-1]
    offset = len(layers) - len(last.layers)
    taps = {k: v + offset for k, v in last.taps.items()}
    taps["input"] = 0
    return Model(layers, taps, last.head_start + offset, models[0].input_shape)


def layer_kinds(model):
    return [type(layer).__name__ for layer in model.layers]


__all__ = [
    "ForwardTrace", "Model", "forward", "backward_gradient", "split",
    "merge_batchnorm", "compose", "layer_kinds", "Layer",
]
