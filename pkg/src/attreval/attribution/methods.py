"""Gradient-, activation- and perturbation-based attribution methods.

Every method takes ``(model, x, target)`` where ``model`` is the part of a
network downstream of some tap, ``x`` is one ``C x H x W`` activation at
that tap and ``target`` is an output index of ``model``. The result is an
:class:`AttributionMap` at the tap's spatial resolution.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..nn.layers import DTYPE
from .maps import AttributionMap, channel_sum, gaussian_kernel1d, upsample_bilinear

# largest batch pushed through the model at once by the batched methods
CHUNK = 32


@dataclass(frozen=True)
class MethodConfig:
    """Hyperparameters shared by all methods.

    ``occlusion_k``/``occlusion_stride`` left as ``None`` select the
    tap-dependent defaults: 8/4 at the input, 3/1 at inner taps.
    """

    intgrad_steps: int = 32
    intgrad_baseline: float = 0.0
    smoothgrad_samples: int = 25
    smoothgrad_noise_frac: float = 0.15
    occlusion_k: int | None = None
    occlusion_stride: int | None = None
    occlusion_baseline: float = 0.0
    rise_masks: int = 1000
    rise_grid: int = 7
    rise_keep_prob: float = 0.5
    smooth_kernel: int = 1

    def __post_init__(self):
        for name in ("intgrad_steps", "smoothgrad_samples", "rise_masks", "rise_grid",
                     "smooth_kernel"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("occlusion_k", "occlusion_stride"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.rise_keep_prob < 1:
            raise ValueError("rise_keep_prob must lie in (0, 1)")
        if self.smoothgrad_noise_frac < 0:
            raise ValueError("smoothgrad_noise_frac must be >= 0")
        if self.smooth_kernel % 2 == 0:
            raise ValueError("smooth_kernel must be odd")

    def occlusion_window(self, at_input):
        k, s = (8, 4) if at_input else (3, 1)
        return (self.occlusion_k or k, self.occlusion_stride or s)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown method config keys: {sorted(unknown)}")
        return cls(**d)


def _check_input(x):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"tap input must be C x H x W, got shape {x.shape}")
    return x.astype(DTYPE, copy=False) if x.dtype != np.float64 else x


def _gradients(model, batch, target, relu_mode="gradient"):
    """Scores and input gradients for a batch, evaluated in chunks."""
    scores, grads = [], []
    for i in range(0, len(batch), CHUNK):
        s, g = model.input_gradient(batch[i:i + CHUNK], target, relu_mode)
        scores.append(s)
        grads.append(g)
    return np.concatenate(scores), np.concatenate(grads)


def _scores(model, batch, target):
    out = []
    for i in range(0, len(batch), CHUNK):
        logits = model(batch[i:i + CHUNK])
        if not 0 <= target < logits.shape[1]:
            raise IndexError(f"target logit {target} out of range for {logits.shape[1]} outputs")
        out.append(logits[:, target])
    return np.concatenate(out).astype(np.float64)


def _result(values, method, tap):
    return AttributionMap(np.asarray(values, dtype=DTYPE), method, tap)


# ----------------------------------------------------------------------------
# backpropagation methods


def gradient_attr(model, x, target, tap=None):
    x = _check_input(x)
    _, g = model.input_gradient(x[None], target)
    return _result(channel_sum(np.abs(g[0])), "gradient", tap)


def guided_backprop_attr(model, x, target, tap=None):
    x = _check_input(x)
    _, g = model.input_gradient(x[None], target, relu_mode="guided")
    return _result(channel_sum(np.abs(g[0])), "guided_backprop", tap)


def ixg_attr(model, x, target, tap=None, raw=False):
    """Input times gradient; ``raw=True`` returns the unsummed ``C x H x W``."""
    x = _check_input(x)
    _, g = model.input_gradient(x[None], target)
    contrib = x * g[0]
    if raw:
        return contrib
    return _result(channel_sum(contrib), "ixg", tap)


def intgrad_attr(model, x, target, steps=32, baseline=0.0, tap=None, raw=False):
    """Integrated gradients on the straight path from ``baseline``.

    Gradients are sampled at the midpoints ``(i + 0.5) / steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = _check_input(x)
    base = np.broadcast_to(np.asarray(baseline, dtype=x.dtype), x.shape)
    delta = x - base
    alphas = ((np.arange(steps) + 0.5) / steps).astype(x.dtype)
    total = np.zeros(x.shape, np.float64)
    for i in range(0, steps, CHUNK):
        a = alphas[i:i + CHUNK].reshape(-1, 1, 1, 1)
        _, g = model.input_gradient(base[None] + a * delta[None], target)
        total += g.sum(axis=0, dtype=np.float64)
    contrib = (delta * (total / steps)).astype(x.dtype)
    if raw:
        return contrib
    return _result(channel_sum(contrib), "intgrad", tap)


SMOOTHGRAD_BASES = ("gradient", "guided_backprop", "ixg", "intgrad")


def smoothgrad_attr(model, x, target, base_method="gradient", n_samples=25,
                    noise_frac=0.15, seed=0, sample_id=0, tap=None, intgrad_steps=32):
    """Average a base method over Gaussian-perturbed copies of ``x``.

    The noise stream depends only on ``(seed, sample_id)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if base_method not in SMOOTHGRAD_BASES:
        raise KeyError(f"unsupported smoothgrad base {base_method!r}")
    x = _check_input(x)
    sigma = noise_frac * float(x.max() - x.min())
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _as_int(sample_id)]))
    noise = (rng.standard_normal((n_samples,) + x.shape) * sigma).astype(x.dtype)
    noisy = x[None] + noise
    acc = np.zeros(x.shape[1:], np.float64)
    if base_method == "intgrad":
        for xi in noisy:
            acc += intgrad_attr(model, xi, target, steps=intgrad_steps).values
    else:
        mode = "guided" if base_method == "guided_backprop" else "gradient"
        _, g = _gradients(model, noisy, target, mode)
        if base_method == "ixg":
            per = (noisy * g).sum(axis=1, dtype=x.dtype)
        else:
            per = np.abs(g).sum(axis=1, dtype=x.dtype)
        acc += per.sum(axis=0, dtype=np.float64)
    return _result(acc / n_samples, f"smoothgrad-{base_method}", tap)


def _as_int(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    # stable across processes, unlike hash()
    return zlib.crc32(str(v).encode("utf-8"))


# ----------------------------------------------------------------------------
# activation-based methods


def gradcam_attr(model, x, target, tap=None):
    x = _check_input(x)
    if x.shape[1] * x.shape[2] < 1:
        raise ValueError("Grad-CAM needs a spatial tap")
    _, g = model.input_gradient(x[None], target)
    alpha = g[0].mean(axis=(1, 2), dtype=np.float64)
    cam = np.tensordot(alpha, x.astype(np.float64), axes=(0, 0))
    return _result(np.maximum(cam, 0), "gradcam", tap)


def layercam_attr(model, x, target, tap=None):
    x = _check_input(x)
    _, g = model.input_gradient(x[None], target)
    cam = channel_sum(np.maximum(g[0], 0) * x)
    return _result(np.maximum(cam, 0), "layercam", tap)


# ----------------------------------------------------------------------------
# perturbation methods


def occlusion_attr(model, x, target, k=8, stride=4, baseline=0.0, tap=None):
    """Sliding-window occlusion; overlapping score drops are averaged."""
    x = _check_input(x)
    _, h, w = x.shape
    if k < 1 or stride < 1:
        raise ValueError("occlusion kernel and stride must be >= 1")
    if k > h or k > w:
        raise ValueError(f"occlusion kernel {k} exceeds spatial size {h}x{w}")
    if stride > k:
        warnings.warn(f"occlusion stride {stride} > kernel {k}: some elements stay uncovered",
                      RuntimeWarning, stacklevel=2)
    y0 = _scores(model, x[None], target)[0]
    windows = [(r, c) for r in range(0, h - k + 1, stride) for c in range(0, w - k + 1, stride)]
    total = np.zeros((h, w), np.float64)
    count = np.zeros((h, w), np.int64)
    for i in range(0, len(windows), CHUNK):
        chunk = windows[i:i + CHUNK]
        batch = np.repeat(x[None], len(chunk), axis=0)
        for j, (r, c) in enumerate(chunk):
            batch[j, :, r:r + k, c:c + k] = baseline
        drops = y0 - _scores(model, batch, target)
        for (r, c), d in zip(chunk, drops):
            total[r:r + k, c:c + k] += d
            count[r:r + k, c:c + k] += 1
    out = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return _result(out, "occlusion", tap)


def rise_masks(shape, n_masks, grid, keep_prob, seed=0, sample_id=0):
    """``n_masks`` smooth random masks of spatial ``shape``.

    Each is a ``grid x grid`` Bernoulli field upsampled to one cell larger
    than the image and cropped at a random sub-cell offset.
    """
    h, w = shape
    ch, cw = -(-h // grid), -(-w // grid)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _as_int(sample_id)]))
    masks = np.empty((n_masks, h, w), DTYPE)
    for m in range(n_masks):
        cells = (rng.random((grid, grid)) < keep_prob).astype(np.float64)
        up = upsample_bilinear(cells, ((grid + 1) * ch, (grid + 1) * cw))
        dy, dx = rng.integers(0, ch), rng.integers(0, cw)
        masks[m] = up[dy:dy + h, dx:dx + w]
    return masks


def rise_attr(model, x, target, n_masks=1000, grid=7, keep_prob=0.5, seed=0, sample_id=0,
              tap=None):
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    if not 0 < keep_prob <= 1:
        raise ValueError("keep_prob must lie in (0, 1]")
    x = _check_input(x)
    masks = rise_masks(x.shape[1:], n_masks, grid, keep_prob, seed, sample_id)
    total = np.zeros(x.shape[1:], np.float64)
    for i in range(0, n_masks, CHUNK):
        mk = masks[i:i + CHUNK]
        scores = _scores(model, x[None] * mk[:, None], target)
        total += np.tensordot(scores, mk.astype(np.float64), axes=(0, 0))
    return _result(total / (n_masks * keep_prob), "rise", tap)


__all__ = [
    "MethodConfig", "gradient_attr", "guided_backprop_attr", "ixg_attr", "intgrad_attr",
    "smoothgrad_attr", "gradcam_attr", "layercam_attr", "occlusion_attr", "rise_attr",
    "rise_masks", "gaussian_kernel1d", "SMOOTHGRAD_BASES",
]
