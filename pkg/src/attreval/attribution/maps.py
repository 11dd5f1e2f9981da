"""Attribution map container and map-level post-processing."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from ..nn.errors import BadMagicError, TruncatedFileError, VersionMismatchError
from ..nn.layers import DTYPE


@dataclass(eq=False)
class AttributionMap:
    """A signed 2-D importance map at some tap's spatial resolution."""

    values: np.ndarray
    method: str = ""
    tap: str | int | None = None
    upsampled: np.ndarray | None = None
    positive_mass_target: float | None = None
    sample_id: str | int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.values.ndim != 2:
            raise ValueError(f"attribution map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError(f"non-finite values in {self.method or 'attribution'} map")

    @property
    def shape(self):
        return self.values.shape

    def upsample(self, size):
        self.upsampled = upsample_bilinear(self.values, size)
        return self.upsampled

    def full(self):
        """The full-resolution view if present, else the raw values."""
        return self.upsampled if self.upsampled is not None else self.values

    def with_values(self, values, method=None):
        return AttributionMap(values, method or self.method, self.tap,
                              sample_id=self.sample_id, extra=dict(self.extra))


def channel_sum(raw):
    """Sum a ``C x H x W`` attribution over channels, keeping the sign."""
    raw = np.asarray(raw)
    if raw.ndim == 2:
        return raw
    if raw.ndim != 3:
        raise ValueError(f"expected C x H x W, got {raw.shape}")
    return raw.sum(axis=0, dtype=raw.dtype)


def _interp_axis(n_in, n_out):
    # half-pixel centres: output u samples input coordinate (u + .5) * n_in / n_out - .5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample_bilinear(values, size):
    """Bilinear resize of a 2-D map (half-pixel convention, edge clamped)."""
    values = np.asarray(values)
    h, w = size
    if values.shape == (h, w):
        return values.astype(DTYPE, copy=True)
    v = values.astype(np.float64)
    r0, r1, fr = _interp_axis(v.shape[0], h)
    rows = v[r0] * (1 - fr)[:, None] + v[r1] * fr[:, None]
    c0, c1, fc = _interp_axis(v.shape[1], w)
    out = rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]
    return out.astype(DTYPE)


def gaussian_kernel1d(k):
    """Normalised 1-D Gaussian taps of odd length ``k`` with sigma ``k/4``."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    sigma = k / 4.0
    x = np.arange(k) - (k - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_kernel2d(k):
    g = gaussian_kernel1d(k)
    return np.outer(g, g)


def smooth_gaussian(amap, k):
    """Convolve with a normalised ``k x k`` Gaussian (sigma ``k/4``), zero padded.

    Accepts an :class:`AttributionMap` (returns a new one) or a 2-D array.
    Zero padding is deliberate: mass near a border leaks outwards, not back.
    """
    g = gaussian_kernel1d(k)
    arr = amap.values if isinstance(amap, AttributionMap) else np.asarray(amap)
    if k == 1:
        out = arr.astype(DTYPE, copy=True)
    else:
        v = arr.astype(np.float64)
        v = correlate1d(v, g, axis=0, mode="constant", cval=0.0)
        v = correlate1d(v, g, axis=1, mode="constant", cval=0.0)
        out = v.astype(DTYPE)
    if isinstance(amap, AttributionMap):
        res = amap.with_values(out, method=f"s-{amap.method}:{k}" if amap.method else "")
        res.extra["smooth_kernel"] = k
        return res
    return out


# ----------------------------------------------------------------------------
# ATMP files: b"ATMP", u32 version, u64 header length, JSON header, f32 payload

ATMP_MAGIC = b"ATMP"
ATMP_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def map_to_bytes(amap, **extra):
    arrays = [amap.values]
    header = {"method": amap.method, "tap": amap.tap, "shape": list(amap.values.shape),
              "sample_id": amap.sample_id, "positive_mass_target": amap.positive_mass_target}
    if amap.upsampled is not None:
        header["upsampled_shape"] = list(amap.upsampled.shape)
        arrays.append(amap.upsampled)
    header.update(amap.extra)
    header.update(extra)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return _PREFIX.pack(ATMP_MAGIC, ATMP_VERSION, len(hbytes)) + hbytes + payload


def map_from_bytes(buf):
    if buf[:4] != ATMP_MAGIC:
        raise BadMagicError("not an ATMP attribution file")
    if len(buf) < _PREFIX.size:
        raise TruncatedFileError("ATMP prefix truncated")
    _, version, hlen = _PREFIX.unpack_from(buf)
    if version != ATMP_VERSION:
        raise VersionMismatchError(f"ATMP version {version}, expected {ATMP_VERSION}")
    start = _PREFIX.size
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    off = start + hlen
    shapes = [header.pop("shape")]
    if "upsampled_shape" in header:
        shapes.append(header.pop("upsampled_shape"))
    arrays = []
    for shape in shapes:
        nbytes = 4 * int(np.prod(shape))
        if len(buf) < off + nbytes:
            raise TruncatedFileError("ATMP payload truncated")
        arrays.append(np.frombuffer(buf[off:off + nbytes], dtype="<f4").reshape(shape).astype(DTYPE))
        off += nbytes
    amap = AttributionMap(arrays[0], header.pop("method"), header.pop("tap"),
                          sample_id=header.pop("sample_id"),
                          positive_mass_target=header.pop("positive_mass_target"))
    if len(arrays) > 1:
        amap.upsampled = arrays[1]
    amap.extra = header
    return amap


def save_map(amap, path, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(map_to_bytes(amap, **extra))
    return path


def load_map(path):
    return map_from_bytes(Path(path).read_bytes())
