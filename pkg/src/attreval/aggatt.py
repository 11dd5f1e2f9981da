"""Aggregate attribution maps by localization percentile.

Maps of one method are ranked by localization score, cut into six
percentile bins and averaged per bin. All bins of a method share one
normaliser, so their heatmaps are directly comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BIN_EDGES = (0, 2, 5, 50, 95, 98, 100)
EMPTY_GRAY = 128


def record_id(rec):
    """Identifier of one explained (grid, target) pair."""
    return f"{rec.sample_id}:{rec.target_cell}"


def sort_key(rec):
    # descending score, then descending in-cell mass, then ascending id
    return (-rec.score, -rec.numerator, rec.sample_id, rec.target_cell)


def bin_boundaries(n, edges=BIN_EDGES):
    """Start index of every bin plus ``n``: ``edge * n / 100`` rounded half up."""
    return [(2 * e * n + 100) // 200 for e in edges]


def median_exemplar(members):
    if not members:
        return None
    return members[(len(members) - 1) // 2]


@dataclass
class AggAttResult:
    bin_edges: tuple
    bins: list
    aggregates: list | None = None
    normalizer: float | None = None
    median_exemplars: list | None = None

    def sizes(self):
        return [len(b) for b in self.bins]


def sort_and_bin(records, maps=None, edges=BIN_EDGES):
    """Rank records and split them into percentile bins.

    ``maps``, when given, is a dict keyed by :func:`record_id` (or a list
    aligned with ``records``) and triggers aggregation.
    """
    records = list(records)
    if not records:
        raise ValueError("AggAtt needs at least one record")
    ids = [record_id(r) for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate (sample, target) records; bin one method/tap/setting at a time")
    ordered = sorted(records, key=sort_key)
    bounds = bin_boundaries(len(ordered), edges)
    bins = [[record_id(r) for r in ordered[a:b]] for a, b in zip(bounds[:-1], bounds[1:])]
    result = AggAttResult(tuple(edges), bins,
                          median_exemplars=[median_exemplar(b) for b in bins])
    if maps is not None:
        if not isinstance(maps, dict):
            maps = dict(zip(ids, maps))
        aggregate(result, maps)
    return result


def _values(m):
    return m.full() if hasattr(m, "full") else np.asarray(m)


def aggregate(result, maps):
    """Per-bin mean maps and the shared normaliser (max absolute aggregate)."""
    missing = [i for b in result.bins for i in b if i not in maps]
    if missing:
        raise KeyError(f"no map for records {missing[:5]}")
    shape = _values(next(iter(maps.values()))).shape
    aggs = []
    for members in result.bins:
        acc = np.zeros(shape, np.float64)
        for i in members:
            acc += _values(maps[i])
        aggs.append((acc / len(members) if members else acc).astype(np.float32))
    result.aggregates = aggs
    result.normalizer = float(max(np.abs(a).max() for a in aggs))
    return aggs, result.normalizer


# ----------------------------------------------------------------------------
# rendering


def _round_u8(x):
    # round half away from zero, inputs are nonnegative here
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def colorize(values, normalizer, mode="diverging"):
    """``H x W x 3`` uint8 image: green for positive, red for negative, white at zero."""
    values = np.asarray(values, np.float64)
    if normalizer <= 0:
        if np.any(values != 0):
            raise ValueError("normalizer must be > 0 for a nonzero map")
        v = np.zeros_like(values)
    else:
        v = values / normalizer
    if mode == "positive":
        v = np.clip(v, 0, 1)
    elif mode == "diverging":
        v = np.clip(v, -1, 1)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    pos, neg = np.maximum(v, 0), np.maximum(-v, 0)
    r = 255 * (1 - pos)
    g = 255 * (1 - neg)
    b = 255 * (1 - pos - neg)
    return np.stack([_round_u8(r), _round_u8(g), _round_u8(b)], axis=-1)


def ppm_bytes(rgb, comment=None):
    h, w, _ = rgb.shape
    head = "P6\n" + (f"# {comment}\n" if comment else "") + f"{w} {h}\n255\n"
    return head.encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes()


def render_heatmap(values, normalizer, mode="diverging", out_path=None):
    """Encode a map as binary PPM; writes ``out_path`` when given and returns the bytes."""
    data = ppm_bytes(colorize(_values(values), normalizer, mode))
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_bytes(data)
    return data


def render_empty(shape, out_path=None):
    rgb = np.full(tuple(shape) + (3,), EMPTY_GRAY, np.uint8)
    data = ppm_bytes(rgb, comment="empty bin")
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_bytes(data)
    return data


def write_aggatt(result, out_dir, mode="diverging", label=None, shape=None):
    """Six PPMs plus ``index.json`` for one method/tap/setting group."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if result.aggregates is None:
        raise ValueError("aggregate the result before writing it")
    shape = shape or result.aggregates[0].shape
    files = []
    for k, (members, agg) in enumerate(zip(result.bins, result.aggregates)):
        lo, hi = result.bin_edges[k], result.bin_edges[k + 1]
        name = f"bin{k}_{lo:02d}-{hi:02d}.ppm"
        if members:
            render_heatmap(agg, result.normalizer, mode, out / name)
        else:
            render_empty(shape, out / name)
        files.append(name)
    index = {
        "schema": 1,
        "label": label,
        "mode": mode,
        "bin_edges": list(result.bin_edges),
        "normalizer": result.normalizer,
        "bins": [{"range": [result.bin_edges[k], result.bin_edges[k + 1]],
                  "members": result.bins[k],
                  "exemplar": result.median_exemplars[k],
                  "image": files[k]} for k in range(len(result.bins))],
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


__all__ = [
    "BIN_EDGES", "AggAttResult", "record_id", "sort_key", "bin_boundaries", "sort_and_bin",
    "aggregate", "median_exemplar", "colorize", "ppm_bytes", "render_heatmap",
    "render_empty", "write_aggatt",
]
