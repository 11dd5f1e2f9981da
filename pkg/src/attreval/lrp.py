"""Layer-wise relevance propagation.

Relevance starts as the target logit and is pushed back layer by layer.
Parameterised layers (convolutions, dense layers) follow a configurable
rule. Routing layers (ReLU, max-pooling, reshapes) pass relevance along
their forward routing. Averaging layers split it in proportion to the
contributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attribution.maps import AttributionMap, channel_sum
from .nn.layers import (DTYPE, AvgPool2d, BatchNorm2d, CellMerge, CellSplit, Conv2d,
                        Flatten, GlobalAvgPool, Linear, MaxPool2d, PointwiseLinear,
                        RegionPool, ReLU)
from .nn.model import Model

# keeps proportional splits of average pools finite; far below f32 resolution
_POOL_EPS = 1e-9


def _sign(z):
    # sign with sign(0) = +1
    return np.where(z >= 0, 1, -1).astype(z.dtype)


def _safe_div(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


# ----------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class Epsilon:
    eps: float = 0.25

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("Epsilon rule needs eps > 0")

    def relevance(self, layer, a, r):
        w, b = layer.weight, layer.bias
        z = layer.linear_forward(a, w, b)
        s = r / (z + z.dtype.type(self.eps) * _sign(z))
        return a * layer.linear_backward(s, w, a.shape)


@dataclass(frozen=True)
class ZPlus:
    def relevance(self, layer, a, r):
        w = layer.weight
        ap, an = np.maximum(a, 0), np.minimum(a, 0)
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        zp = layer.linear_forward(ap, wp) + layer.linear_forward(an, wn)
        s = _safe_div(r, zp)
        return ap * layer.linear_backward(s, wp, a.shape) + \
            an * layer.linear_backward(s, wn, a.shape)


@dataclass(frozen=True)
class Gamma:
    """Generalised gamma rule.

    Outputs with ``z >= 0`` boost positive weights for positive inputs and
    negative weights for negative inputs; outputs with ``z < 0`` boost the
    opposite pairings. Written as ``base + gamma * extra`` so that
    ``gamma=0`` reduces exactly to ``Epsilon(stabilizer)``.
    """

    gamma: float = 0.25
    stabilizer: float = 1e-6

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("Gamma rule needs gamma >= 0")
        if not self.stabilizer > 0:
            raise ValueError("stabilizer must be > 0")

    def relevance(self, layer, a, r):
        w, b = layer.weight, layer.bias
        ap, an = np.maximum(a, 0), np.minimum(a, 0)
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        g = a.dtype.type(self.gamma)
        z = layer.linear_forward(a, w, b)
        pos = z >= 0
        if b is None:
            bp = bn = None
        else:
            bp, bn = np.maximum(b, 0), np.minimum(b, 0)
        extra_pos = layer.linear_forward(ap, wp, bp) + layer.linear_forward(an, wn)
        extra_neg = layer.linear_forward(ap, wn, bn) + layer.linear_forward(an, wp)
        den = z + g * np.where(pos, extra_pos, extra_neg)
        s = r / (den + den.dtype.type(self.stabilizer) * _sign(den))
        s_pos = np.where(pos, s, 0).astype(s.dtype)
        s_neg = s - s_pos
        bwd = layer.linear_backward
        extra = (ap * (bwd(s_pos, wp, a.shape) + bwd(s_neg, wn, a.shape))
                 + an * (bwd(s_pos, wn, a.shape) + bwd(s_neg, wp, a.shape)))
        return a * bwd(s, w, a.shape) + g * extra


@dataclass(frozen=True)
class ZB:
    """Bounded-input rule for the pixel layer (inputs within ``[low, high]``)."""

    low: float = 0.0
    high: float = 1.0

    def relevance(self, layer, a, r):
        w = layer.weight
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        lo = np.full_like(a, self.low)
        hi = np.full_like(a, self.high)
        z = (layer.linear_forward(a, w) - layer.linear_forward(lo, wp)
             - layer.linear_forward(hi, wn))
        s = r / (z + z.dtype.type(_POOL_EPS) * _sign(z))
        bwd = layer.linear_backward
        return a * bwd(s, w, a.shape) - lo * bwd(s, wp, a.shape) - hi * bwd(s, wn, a.shape)


@dataclass(frozen=True)
class Passthrough:
    """Hands relevance to the input unchanged; only valid for shape-preserving layers."""

    def relevance(self, layer, a, r):
        if r.shape != a.shape:
            raise ValueError(f"Passthrough on {layer.name} changes shape {a.shape} -> {r.shape}")
        return r


# ----------------------------------------------------------------------------
# configurations


def _is_dense(layer):
    return isinstance(layer, (Linear, PointwiseLinear))


def _is_conv(layer):
    return isinstance(layer, Conv2d) and not isinstance(layer, PointwiseLinear)


@dataclass(frozen=True)
class LrpConfig:
    """Rule assignment by layer kind, with optional per-index overrides.

    ``first`` applies to the first convolution when the explained model
    starts at the network input; at inner taps that layer uses ``conv``.
    """

    name: str
    conv: object = None
    dense: object = None
    first: object = None
    overrides: dict = field(default_factory=dict)

    @classmethod
    def focus(cls):
        return cls("focus", conv=ZPlus(), dense=Epsilon(0.25), first=ZB())

    @classmethod
    def composite(cls, gamma):
        if math.isinf(gamma):
            return cls.focus()
        return cls(f"composite:{gamma:g}", conv=Gamma(gamma), dense=Epsilon(0.25), first=ZB())

    @classmethod
    def epsilon_conv(cls, eps=1e-6):
        """Epsilon on the convolutions; the limit of ``composite(0)``."""
        return cls(f"epsilon:{eps:g}", conv=Epsilon(eps), dense=Epsilon(0.25), first=ZB())

    @classmethod
    def zplus(cls):
        return cls("zplus", conv=ZPlus(), dense=ZPlus(), first=None)

    @classmethod
    def parse(cls, spec):
        """``focus``, ``zplus``, ``composite:<gamma>`` (``inf`` allowed) or ``epsilon:<eps>``."""
        kind, _, arg = str(spec).strip().lower().partition(":")
        if kind == "focus" and not arg:
            return cls.focus()
        if kind == "zplus" and not arg:
            return cls.zplus()
        if kind == "composite":
            return cls.composite(float(arg) if arg else 0.25)
        if kind == "epsilon":
            return cls.epsilon_conv(float(arg) if arg else 1e-6)
        raise ValueError(f"unknown LRP preset {spec!r}")

    def rule_map(self, model, at_input=None):
        if at_input is None:
            at_input = model.meta.get("tap_index", 0) == 0
        first_conv = next((i for i, l in enumerate(model.layers) if _is_conv(l)), None)
        rules = {}
        for i, layer in enumerate(model.layers):
            if isinstance(layer, BatchNorm2d):
                raise ValueError(f"layer {i} is an unmerged BatchNorm2d; merge it before LRP")
            if i in self.overrides:
                rule = self.overrides[i]
            elif _is_dense(layer):
                rule = self.dense
            elif _is_conv(layer):
                use_first = at_input and i == first_conv and self.first is not None
                rule = self.first if use_first else self.conv
            else:
                continue
            if rule is None:
                raise ValueError(f"LRP config {self.name!r} has no rule for layer {i} ({layer.name})")
            if isinstance(rule, ZB) and not (at_input and i == first_conv):
                raise ValueError(f"ZB rule only allowed on the first layer at the input (layer {i})")
            rules[i] = rule
        return rules


# ----------------------------------------------------------------------------


def _route(layer, ctx, a, z, r):
    if isinstance(layer, (ReLU,)):
        return r
    if isinstance(layer, MaxPool2d):
        return layer.route(ctx, r)
    if isinstance(layer, (Flatten, CellSplit, CellMerge)):
        return layer.backward(ctx, r)
    if isinstance(layer, (AvgPool2d, GlobalAvgPool, RegionPool)):
        s = r / (z + z.dtype.type(_POOL_EPS) * _sign(z))
        return a * layer.backward(ctx, s)
    raise TypeError(f"no relevance routing for layer type {layer.name}")


def lrp_relevances(model, x, target, config, at_input=None):
    """Per-boundary relevance tensors; entry ``i`` is the relevance of layer ``i``'s input."""
    if isinstance(config, str):
        config = LrpConfig.parse(config)
    rules = config.rule_map(model, at_input)
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"tap input must be C x H x W, got shape {x.shape}")
    trace = model.forward(x[None].astype(DTYPE) if x.dtype != np.float64 else x[None])
    seed = model.target_seed(trace.logits, target)
    rel = [None] * (len(model.layers) + 1)
    r = seed * trace.logits
    rel[-1] = r
    for i in range(len(model.layers) - 1, -1, -1):
        layer, a, ctx = model.layers[i], trace.activations[i], trace.ctxs[i]
        if i in rules:
            r = rules[i].relevance(layer, a, r)
        else:
            r = _route(layer, ctx, a, trace.activations[i + 1], r)
        rel[i] = r
    return rel


def lrp_attr(model, x, target, config="focus", tap=None, at_input=None):
    """Channel-summed relevance at the explained model's input."""
    if isinstance(config, str):
        config = LrpConfig.parse(config)
    rel = lrp_relevances(model, x, target, config, at_input)
    return AttributionMap(channel_sum(rel[0][0]), f"lrp-{config.name}", tap)


# ----------------------------------------------------------------------------

GAMMAS = (0.0, 0.001, 0.01, 0.1, 0.25, math.inf)


def gamma_sweep(model, grids, gammas=GAMMAS, taps=("input", "mid", "final"), seed=0,
                workers=1):
    """Localization quartiles of composite LRP per gamma and tap on GridPG grids.

    Returns ``{gamma: {tap: Quartiles}}``; ``inf`` is the Focus preset.
    """
    from .analysis import quartiles
    from .grids import run_campaign

    methods = [f"lrp-{LrpConfig.composite(g).name}" for g in gammas]
    result = run_campaign(model, methods, list(taps), ["gridpg"], {"gridpg": grids},
                          seed=seed, workers=workers)
    table = {}
    for g, m in zip(gammas, methods):
        table[g] = {}
        for t in taps:
            scores = [rec.score for rec in result.records if rec.method == m and rec.tap == t]
            table[g][t] = quartiles(scores)
    return table


# ----------------------------------------------------------------------------


def implinv_transform(model):
    """Rewire a disconnected-cell head so disconnected features carry relevance.

    The head ``GlobalAvgPool -> CellMerge(n) -> Linear`` with block-diagonal
    weights is replaced by two linear layers. The first has ``k + 2``
    neurons per cell: ``k`` reproduce the cell's class scores, the other two
    sum every other cell's pooled features with weight +1 and -1. The second
    adds the two aggregators to each class score, where they cancel. Logits
    are unchanged up to rounding.
    """
    layers = list(model.layers)
    if len(layers) < 3 or not (isinstance(layers[-1], Linear) and isinstance(layers[-2], CellMerge)
                               and isinstance(layers[-3], GlobalAvgPool)):
        raise ValueError("expected a GlobalAvgPool -> CellMerge -> Linear head")
    n2 = layers[-2].n ** 2
    head = layers[-1]
    w = head.weight
    out, feat = w.shape
    if out % n2 or feat % n2:
        raise ValueError(f"head weight {w.shape} is not block-diagonal over {n2} cells")
    k, c = out // n2, feat // n2
    blocks = w.reshape(n2, k, n2, c)
    for i in range(n2):
        for j in range(n2):
            if i != j and np.any(blocks[i, :, j]):
                raise ValueError("head weight has nonzero off-diagonal blocks")
    b = head.bias if head.bias is not None else np.zeros(out, DTYPE)
    w1 = np.zeros((n2, k + 2, n2, c), DTYPE)
    b1 = np.zeros((n2, k + 2), DTYPE)
    w2 = np.zeros((n2, k, n2, k + 2), DTYPE)
    for i in range(n2):
        w1[i, :k, i] = blocks[i, :, i]
        b1[i, :k] = b.reshape(n2, k)[i]
        others = [j for j in range(n2) if j != i]
        w1[i, k, others] = 1.0
        w1[i, k + 1, others] = -1.0
        w2[i, :, i, :k] = np.eye(k, dtype=DTYPE)
        w2[i, :, i, k:] = 1.0
    lc_prime = Linear(w1.reshape(n2 * (k + 2), feat), b1.reshape(-1))
    lc = Linear(w2.reshape(out, n2 * (k + 2)), None)
    meta = dict(model.meta)
    meta["implinv"] = True
    return Model(layers[:-1] + [lc_prime, lc], model.taps, model.head_start, model.input_shape,
                 meta)


__all__ = [
    "Epsilon", "ZPlus", "Gamma", "ZB", "Passthrough", "LrpConfig", "lrp_attr",
    "lrp_relevances", "gamma_sweep", "GAMMAS", "implinv_transform",
]
