"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .nn.layers import DTYPE


def check_images(x, channels=None):
    """Validate an ``(N, C, H, W)`` image batch; returns float32."""
    x = check_array(x, allow_nd=True, dtype=[DTYPE, np.float64], ensure_all_finite=True,
                    ensure_min_samples=1)
    if x.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W), got {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[1]}")
    return x.astype(DTYPE, copy=False)


def check_labels(y, n_samples, num_classes=None):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"labels must be 1-D of length {n_samples}, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or (num_classes is not None and np.any(y >= num_classes)):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def check_tap_input(x):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"tap input must be C x H x W, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tap input contains NaN or Inf")
    return x


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_fraction(value, name, low=0.0, high=1.0, open_low=False, open_high=False):
    v = float(value)
    bad_low = v <= low if open_low else v < low
    bad_high = v >= high if open_high else v > high
    if bad_low or bad_high or not np.isfinite(v):
        lb, hb = "(" if open_low else "[", ")" if open_high else "]"
        raise ValueError(f"{name} must lie in {lb}{low}, {high}{hb}, got {value}")
    return v


__all__ = ["check_images", "check_labels", "check_tap_input", "check_int", "check_fraction"]
