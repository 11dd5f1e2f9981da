"""Datasets: a seeded synthetic shape task and the CIFAR-10 binary format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn.layers import DTYPE
from .nn.training import predict_logits, softmax

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                 "dog", "frog", "horse", "ship", "truck")


@dataclass(frozen=True, eq=False)
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int
    id: str

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError("pixels must be C x H x W")


def stack(images):
    """``(pixels (N, C, H, W), labels (N,))`` from a list of images."""
    if not images:
        return np.zeros((0, 3, 32, 32), DTYPE), np.zeros(0, np.int64)
    return (np.stack([im.pixels for im in images]).astype(DTYPE),
            np.array([im.label for im in images], dtype=np.int64))


# ----------------------------------------------------------------------------
# synthetic shapes

# one RGB colour per class; with the shape table below every class is a
# unique (shape, colour) pair
_COLORS = np.array([
    (0.90, 0.15, 0.15), (0.15, 0.80, 0.20), (0.20, 0.30, 0.95), (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85), (0.10, 0.85, 0.85), (1.00, 0.55, 0.05), (0.55, 0.25, 0.80),
    (0.95, 0.95, 0.95), (0.55, 0.95, 0.30),
])
_SHAPES = ("disk", "square", "triangle", "plus", "ring",
           "diamond", "xcross", "frame", "halfdisk", "hbars")


def _shape_mask(kind, yy, xx, r):
    ay, ax = np.abs(yy), np.abs(xx)
    rr = np.sqrt(yy ** 2 + xx ** 2)
    t = max(r * 0.35, 1.5)
    if kind == "disk":
        return rr <= r
    if kind == "square":
        return (ay <= r * 0.8) & (ax <= r * 0.8)
    if kind == "triangle":
        return (yy <= r * 0.8) & (yy >= -r) & (ax <= (yy + r) * 0.55)
    if kind == "plus":
        return ((ay <= t * 0.6) & (ax <= r)) | ((ax <= t * 0.6) & (ay <= r))
    if kind == "ring":
        return (rr <= r) & (rr >= r - t)
    if kind == "diamond":
        return ay + ax <= r
    if kind == "xcross":
        return (np.abs(yy - xx) <= t * 0.8) & (ay <= r * 0.8) | \
            (np.abs(yy + xx) <= t * 0.8) & (ay <= r * 0.8)
    if kind == "frame":
        return (np.maximum(ay, ax) <= r * 0.85) & (np.maximum(ay, ax) >= r * 0.85 - t)
    if kind == "halfdisk":
        return (rr <= r) & (yy >= 0)
    if kind == "hbars":
        band = np.floor((yy + r) / (2 * r / 5)).astype(int)
        return (ay <= r) & (ax <= r) & (band % 2 == 0)
    raise KeyError(kind)


def _render(rng, label, size):
    # textured background: coarse colour blobs plus fine noise
    coarse = rng.uniform(0.15, 0.55, size=(3, 5, 5))
    ramp = np.linspace(0, 4, size)
    iy = np.clip(ramp, 0, 3.999)
    i0 = iy.astype(int)
    f = iy - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    bg = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    bg = bg + rng.normal(0, 0.06, size=(3, size, size))
    r = rng.uniform(size * 0.2, size * 0.34)
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    mask = _shape_mask(_SHAPES[label % len(_SHAPES)], yy - cy, xx - cx, r)
    color = np.clip(_COLORS[label % len(_COLORS)] + rng.normal(0, 0.05, 3), 0, 1)
    shade = 1.0 + rng.normal(0, 0.05, size=(size, size))
    img = np.where(mask[None], color[:, None, None] * shade[None], bg)
    return np.clip(img, 0, 1).astype(DTYPE)


def gen_synthetic(count, num_classes=10, size=32, seed=0, start=0):
    """Render ``count`` images; image ``i`` depends only on ``(seed, start + i)``.

    Labels cycle through the classes, so any ``num_classes`` consecutive
    images contain each class once.
    """
    if count <= 0:
        raise ValueError("count must be > 0")
    if not 1 <= num_classes <= len(_SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(_SHAPES)}]")
    out = []
    for i in range(start, start + count):
        label = i % num_classes
        rng = np.random.default_rng([seed, i])
        out.append(LabeledImage(_render(rng, label, size), label, f"syn:{seed}:{i}"))
    return out


# ----------------------------------------------------------------------------
# CIFAR-10


def load_cifar10(path, expected_records=None):
    """Read a CIFAR-10 binary batch (``1 label byte + 3072 pixel bytes`` each)."""
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a positive multiple of {CIFAR_RECORD}")
    n = raw.size // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise ValueError(f"{path}: {n} records, expected {expected_records}")
    rec = raw.reshape(n, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    pixels = rec[:, 1:].reshape(n, 3, 32, 32).astype(DTYPE) / DTYPE(255)
    return [LabeledImage(pixels[i], int(labels[i]), f"cifar:{path.name}:{i}") for i in range(n)]


def cifar10_to_bytes(images):
    """Inverse of :func:`load_cifar10` for images that came from it."""
    out = bytearray()
    for im in images:
        px = np.rint(im.pixels * 255).astype(np.uint8).reshape(-1)
        out.append(im.label)
        out += px.tobytes()
    return bytes(out)


# ----------------------------------------------------------------------------


def filter_confident(model, images, threshold=0.99, batch_size=256):
    """Keep images classified correctly with softmax confidence >= threshold.

    Input order is preserved.
    """
    if not images:
        return []
    x, y = stack(images)
    probs = softmax(predict_logits(model, x, batch_size).astype(np.float64))
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(len(y)), y]
    keep = (pred == y) & (conf >= threshold)
    return [im for im, k in zip(images, keep) if k]
