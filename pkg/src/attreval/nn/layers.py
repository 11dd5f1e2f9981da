"""Layer kernels for the sequential CNN engine.

All layers work on batched float32 arrays, ``(N, C, H, W)`` for spatial
layers and ``(N, D)`` for dense ones. Products are computed as stacked
per-sample matmuls so a sample's result never depends on what else is in
the batch; several downstream guarantees (exact zeros in disconnected grid
cells, worker-count independent campaigns) rely on this.

``forward`` returns ``(output, ctx)``; ``backward`` consumes that ``ctx``.
Layers never mutate their inputs and hold no per-call state, so one layer
object can be shared between threads or processes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DTYPE = np.float32


def _as_param(a, shape=None):
    arr = np.ascontiguousarray(a, dtype=DTYPE)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"parameter shape {arr.shape} != expected {tuple(shape)}")
    return arr


class Layer:
    """Base class. Subclasses set ``param_names`` and implement the kernels."""

    param_names: tuple[str, ...] = ()
    spatial = False

    def forward(self, x):
        raise NotImplementedError

    def backward(self, ctx, gy):
        raise NotImplementedError

    def param_grads(self, ctx, gy):
        return {}

    def output_shape(self, shape):
        return tuple(shape)

    def config(self):
        return {}

    def params(self):
        return {name: getattr(self, name) for name in self.param_names
                if getattr(self, name) is not None}

    def with_params(self, **params):
        """Copy of this layer with some parameters replaced."""
        kwargs = dict(self.config())
        kwargs.update(self.params())
        kwargs.update(params)
        return type(self)(**kwargs)

    def astype(self, dtype):
        """Copy with parameters cast (used by float64 gradient checks)."""
        new = self.with_params()
        for name, value in self.params().items():
            object.__setattr__(new, name, np.asarray(value, dtype=dtype))
        return new

    @property
    def name(self):
        return type(self).__name__

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self.params().items())
        return f"{self.name}({', '.join(s for s in (cfg, shapes) if s)})"


def _check_ndim(layer, shape, ndim):
    if len(shape) != ndim:
        raise ShapeError(f"{layer.name} expects {ndim}-d sample input, got shape {tuple(shape)}")


# ----------------------------------------------------------------------------
# im2col helpers


def im2col(x, kh, kw, stride, padding):
    """``(N, C, H, W)`` -> ``(N, C*kh*kw, Ho*Wo)`` patch matrix.

    Row order (channel, kernel row, kernel col) matches
    ``weight.reshape(out, -1)``.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def col2im(gcols, x_shape, kh, kw, stride, padding, ho, wo):
    """Adjoint of :func:`im2col`; accumulates patch gradients into the input."""
    n, c, h, w = x_shape
    g = gcols.reshape(n, c, kh * kw, ho, wo)
    gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i * kw + j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


# ----------------------------------------------------------------------------
# parameterized layers


class Conv2d(Layer):
    param_names = ("weight", "bias")
    spatial = True

    def __init__(self, weight, bias=None, stride=1, padding=0):
        weight = _as_param(weight)
        if weight.ndim != 4:
            raise ValueError("Conv2d weight must be out x in x kh x kw")
        self.weight = weight
        self.bias = None if bias is None else _as_param(bias, (weight.shape[0],))
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def kernel_size(self):
        return self.weight.shape[2:]

    def config(self):
        return {"stride": self.stride, "padding": self.padding}

    def output_shape(self, shape):
        _check_ndim(self, shape, 3)
        c, h, w = shape
        o, ci, kh, kw = self.weight.shape
        if c != ci:
            raise ShapeError(f"Conv2d expects {ci} input channels, got {c}")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2d kernel {kh}x{kw} does not fit input {h}x{w}")
        return (o, ho, wo)

    def linear_forward(self, x, weight, bias=None):
        """The convolution with substitute weights (used by LRP rules)."""
        kh, kw = weight.shape[2:]
        cols, ho, wo = im2col(x, kh, kw, self.stride, self.padding)
        return self._apply(cols, weight, bias, ho, wo)

    def _apply(self, cols, weight, bias, ho, wo):
        y = weight.reshape(weight.shape[0], -1) @ cols
        if bias is not None:
            y = y + bias[:, None]
        return y.reshape(cols.shape[0], weight.shape[0], ho, wo)

    def linear_backward(self, gy, weight, x_shape):
        """Input-gradient of the convolution with substitute weights."""
        n, o, ho, wo = gy.shape
        kh, kw = weight.shape[2:]
        gcols = weight.reshape(o, -1).T @ gy.reshape(n, o, ho * wo)
        return col2im(gcols, x_shape, kh, kw, self.stride, self.padding, ho, wo)

    def forward(self, x):
        kh, kw = self.kernel_size
        cols, ho, wo = im2col(x, kh, kw, self.stride, self.padding)
        return self._apply(cols, self.weight, self.bias, ho, wo), (x.shape, cols)

    def backward(self, ctx, gy):
        x_shape, _ = ctx
        return self.linear_backward(gy, self.weight, x_shape)

    def param_grads(self, ctx, gy):
        _, cols = ctx
        n, o, ho, wo = gy.shape
        gmat = gy.reshape(n, o, ho * wo)
        gw = (gmat @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
        grads = {"weight": gw}
        if self.bias is not None:
            grads["bias"] = gmat.sum(axis=(0, 2))
        return grads


class PointwiseLinear(Conv2d):
    """A dense layer applied independently at every spatial position.

    Functionally a 1x1 convolution; kept as its own type so relevance rules
    treat it as a fully connected layer.
    """

    def __init__(self, weight, bias=None, stride=1, padding=0):
        weight = _as_param(weight)
        if weight.ndim == 2:
            weight = weight[:, :, None, None]
        super().__init__(weight, bias, 1, 0)

    def config(self):
        return {}


class Linear(Layer):
    param_names = ("weight", "bias")

    def __init__(self, weight, bias=None):
        weight = _as_param(weight)
        if weight.ndim != 2:
            raise ValueError("Linear weight must be out x in")
        self.weight = weight
        self.bias = None if bias is None else _as_param(bias, (weight.shape[0],))

    def output_shape(self, shape):
        _check_ndim(self, shape, 1)
        if shape[0] != self.weight.shape[1]:
            raise ShapeError(f"Linear expects {self.weight.shape[1]} features, got {shape[0]}")
        return (self.weight.shape[0],)

    def linear_forward(self, x, weight, bias=None):
        y = (x[:, None, :] @ weight.T)[:, 0, :]
        return y if bias is None else y + bias

    def linear_backward(self, gy, weight, x_shape):
        return (gy[:, None, :] @ weight)[:, 0, :]

    def forward(self, x):
        return self.linear_forward(x, self.weight, self.bias), x

    def backward(self, ctx, gy):
        return self.linear_backward(gy, self.weight, ctx.shape)

    def param_grads(self, ctx, gy):
        grads = {"weight": gy.T @ ctx}
        if self.bias is not None:
            grads["bias"] = gy.sum(axis=0)
        return grads


class BatchNorm2d(Layer):
    """Batch normalisation; ``forward`` always uses the running statistics."""

    param_names = ("gamma", "beta", "running_mean", "running_var")

    def __init__(self, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.1):
        self.gamma = _as_param(gamma)
        c = self.gamma.shape
        self.beta = _as_param(beta, c)
        self.running_mean = _as_param(running_mean, c)
        self.running_var = _as_param(running_var, c)
        if eps <= 0:
            raise ValueError("BatchNorm2d eps must be > 0")
        if np.any(self.running_var < 0):
            raise ValueError("BatchNorm2d running_var must be >= 0")
        self.eps = float(eps)
        self.momentum = float(momentum)

    def config(self):
        return {"eps": self.eps, "momentum": self.momentum}

    def output_shape(self, shape):
        if shape[0] != self.gamma.shape[0]:
            raise ShapeError(f"BatchNorm2d expects {self.gamma.shape[0]} channels, got {shape[0]}")
        return tuple(shape)

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def scale_shift(self):
        scale = self.gamma / np.sqrt(self.running_var + DTYPE(self.eps))
        return scale, self.beta - self.running_mean * scale

    def forward(self, x):
        scale, shift = self.scale_shift()
        return x * self._bcast(scale, x.ndim) + self._bcast(shift, x.ndim), x.ndim

    def backward(self, ctx, gy):
        scale, _ = self.scale_shift()
        return gy * self._bcast(scale, ctx)

    # training mode: batch statistics
    def forward_train(self, x):
        axes = (0,) + tuple(range(2, x.ndim))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x.ndim)) * self._bcast(inv, x.ndim)
        y = xhat * self._bcast(self.gamma, x.ndim) + self._bcast(self.beta, x.ndim)
        count = x.size // x.shape[1]
        return y.astype(x.dtype), (xhat, inv, axes, mean, var, count)

    def backward_train(self, ctx, gy):
        xhat, inv, axes, *_ = ctx
        nd = gy.ndim
        gxhat = gy * self._bcast(self.gamma, nd)
        m = gxhat.mean(axis=axes, keepdims=True)
        mx = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = (gxhat - m - xhat * mx) * self._bcast(inv, nd)
        grads = {"gamma": (gy * xhat).sum(axis=axes), "beta": gy.sum(axis=axes)}
        return gx.astype(gy.dtype), grads

    def updated_running_stats(self, ctx):
        _, _, _, mean, var, count = ctx
        unbiased = var * count / max(count - 1, 1)
        m = DTYPE(self.momentum)
        return ((1 - m) * self.running_mean + m * mean).astype(DTYPE), \
            ((1 - m) * self.running_var + m * unbiased).astype(DTYPE)


# ----------------------------------------------------------------------------
# parameter-free layers


class ReLU(Layer):
    def forward(self, x):
        return np.maximum(x, 0), x

    def backward(self, ctx, gy):
        return gy * (ctx > 0)

    def backward_guided(self, ctx, gy):
        return gy * ((ctx > 0) & (gy > 0))


class MaxPool2d(Layer):
    spatial = True

    def __init__(self, k=2, stride=None):
        self.k = int(k)
        self.stride = int(stride if stride is not None else k)

    def config(self):
        return {"k": self.k, "stride": self.stride}

    def output_shape(self, shape):
        _check_ndim(self, shape, 3)
        c, h, w = shape
        ho = (h - self.k) // self.stride + 1
        wo = (w - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"MaxPool2d window {self.k} does not fit input {h}x{w}")
        return (c, ho, wo)

    def forward(self, x):
        k, s = self.k, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        # np.argmax returns the first maximal index in row-major window order
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def route(self, ctx, gy):
        x_shape, idx = ctx
        k, s = self.k, self.stride
        ho, wo = idx.shape[2:]
        gx = np.zeros(x_shape, dtype=gy.dtype)
        for off in range(k * k):
            i, j = divmod(off, k)
            gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(idx == off, gy, 0)
        return gx

    backward = route


class AvgPool2d(Layer):
    spatial = True

    def __init__(self, k=2, stride=None):
        self.k = int(k)
        self.stride = int(stride if stride is not None else k)

    def config(self):
        return {"k": self.k, "stride": self.stride}

    output_shape = MaxPool2d.output_shape

    def forward(self, x):
        k, s = self.k, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.mean(axis=(-2, -1), dtype=x.dtype), x.shape

    def backward(self, ctx, gy):
        k, s = self.k, self.stride
        ho, wo = gy.shape[2:]
        gx = np.zeros(ctx, dtype=gy.dtype)
        part = gy / gy.dtype.type(k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += part
        return gx


class GlobalAvgPool(Layer):
    def output_shape(self, shape):
        _check_ndim(self, shape, 3)
        return (shape[0],)

    def forward(self, x):
        return x.mean(axis=(2, 3), dtype=x.dtype), x.shape

    def backward(self, ctx, gy):
        n, c, h, w = ctx
        g = gy / gy.dtype.type(h * w)
        return np.broadcast_to(g[:, :, None, None], ctx).copy()


class Flatten(Layer):
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, ctx, gy):
        return gy.reshape(ctx)


# ----------------------------------------------------------------------------
# layout layers used by the grid evaluation settings


class CellSplit(Layer):
    """Cut a composite ``(N, C, n*h, n*w)`` into ``(N*n*n, C, h, w)`` cells.

    Cells are stacked in row-major order directly after their sample.
    """

    spatial = True

    def __init__(self, n):
        self.n = int(n)

    def config(self):
        return {"n": self.n}

    def output_shape(self, shape):
        _check_ndim(self, shape, 3)
        c, h, w = shape
        if h % self.n or w % self.n:
            raise ShapeError(f"composite {h}x{w} is not divisible into a {self.n}x{self.n} grid")
        return (c, h // self.n, w // self.n)

    def forward(self, x):
        n = self.n
        b, c, h, w = x.shape
        y = x.reshape(b, c, n, h // n, n, w // n).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(y.reshape(b * n * n, c, h // n, w // n)), x.shape

    def backward(self, ctx, gy):
        n = self.n
        b, c, h, w = ctx
        g = gy.reshape(b, n, n, c, h // n, w // n).transpose(0, 3, 1, 4, 2, 5)
        return np.ascontiguousarray(g.reshape(ctx))


class CellMerge(Layer):
    """Inverse bookkeeping of :class:`CellSplit` for flat per-cell outputs."""

    def __init__(self, n):
        self.n = int(n)

    def config(self):
        return {"n": self.n}

    def output_shape(self, shape):
        _check_ndim(self, shape, 1)
        return (self.n * self.n * shape[0],)

    def forward(self, x):
        cells = self.n * self.n
        return x.reshape(x.shape[0] // cells, cells * x.shape[1]), x.shape

    def backward(self, ctx, gy):
        return gy.reshape(ctx)


class RegionPool(Layer):
    """Average ``(N, C, H, W)`` over labelled regions -> ``(N, R*C)``.

    ``labels`` assigns every spatial position to one of ``R`` regions;
    output index ``r*C + c`` holds channel ``c`` pooled over region ``r``.
    """

    param_names = ("labels",)

    def __init__(self, labels):
        self.labels = np.asarray(labels).astype(DTYPE)
        lab = self.labels.astype(np.int64)
        self.n_regions = int(lab.max()) + 1
        self._onehot = np.stack([(lab == r) for r in range(self.n_regions)]).reshape(
            self.n_regions, -1).astype(DTYPE)
        self._counts = self._onehot.sum(axis=1)
        if np.any(self._counts == 0):
            raise ValueError("RegionPool labels leave a region empty")

    def astype(self, dtype):
        new = RegionPool(self.labels)
        new._onehot = new._onehot.astype(dtype)
        new._counts = new._counts.astype(dtype)
        return new

    def output_shape(self, shape):
        _check_ndim(self, shape, 3)
        if tuple(shape[1:]) != self.labels.shape:
            raise ShapeError(f"RegionPool labels {self.labels.shape} != feature map {tuple(shape[1:])}")
        return (self.n_regions * shape[0],)

    def forward(self, x):
        n, c, h, w = x.shape
        w_avg = (self._onehot / self._counts[:, None]).astype(x.dtype)
        y = x.reshape(n, c, h * w) @ w_avg.T  # (n, c, R)
        return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(n, -1), x.shape

    def backward(self, ctx, gy):
        n, c, h, w = ctx
        w_avg = (self._onehot / self._counts[:, None]).astype(gy.dtype)
        g = gy.reshape(n, self.n_regions, c).transpose(0, 2, 1) @ w_avg
        return g.reshape(ctx)


LAYER_TYPES = {cls.__name__: cls for cls in (
    Conv2d, PointwiseLinear, Linear, BatchNorm2d, ReLU, MaxPool2d, AvgPool2d,
    GlobalAvgPool, Flatten, CellSplit, CellMerge, RegionPool,
)}
