"""Central finite-difference checks for layer backward kernels, in float64."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GradCheck:
    layer: str
    wrt: str
    max_rel_error: float

    def ok(self, tol=1e-3):
        return self.max_rel_error < tol


def _rel_error(analytic, numeric, floor=1e-6):
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _numeric(f, x, h):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_layer(layer, x, seed=0, h=1e-6, train=False):
    """Compare a layer's backward (and parameter gradients) with finite differences.

    The scalar probed is ``sum(r * layer(x))`` for a fixed random ``r``.
    ``train=True`` checks the batch-statistics path of BatchNorm.
    Returns one :class:`GradCheck` per differentiated quantity.
    """
    layer = layer.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    fwd = layer.forward_train if train else layer.forward
    y, _ = fwd(x)
    r = np.random.default_rng(seed).standard_normal(y.shape)

    def scalar():
        return float(np.sum(fwd(x)[0] * r))

    _, ctx = fwd(x)
    if train:
        gx, pgrads = layer.backward_train(ctx, r)
    else:
        gx, pgrads = layer.backward(ctx, r), layer.param_grads(ctx, r)
    out = [GradCheck(layer.name, "input", _rel_error(gx, _numeric(scalar, x, h)))]
    for name, analytic in sorted(pgrads.items()):
        param = getattr(layer, name)
        out.append(GradCheck(layer.name, name, _rel_error(analytic, _numeric(scalar, param, h))))
    return out


def check_model(model, x, target=0, h=1e-6):
    """Input gradient of one logit through a whole model versus finite differences."""
    m = model.astype(np.float64)
    x = np.array(x, dtype=np.float64)
    _, g = m.input_gradient(x, target)

    def scalar():
        return float(m(x)[:, target].sum())

    return GradCheck("Model", "input", _rel_error(g, _numeric(scalar, x, h)))


__all__ = ["GradCheck", "check_layer", "check_model"]
