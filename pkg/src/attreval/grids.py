"""Grid settings, the localization score and evaluation campaigns.

A grid is an ``n x n`` composite of cell images. Three settings decide how a
classifier sees it:

``gridpg``
    the whole network runs on the composite and the classification head is
    applied at every position of the final feature map, then pooled globally.
``difull``
    every cell passes through the backbone on its own and has its own head,
    so a cell's logits cannot depend on any other cell.
``dipart``
    the backbone runs on the composite, the head is applied pointwise and
    cell ``i``'s logits pool only positions whose receptive-field centre
    lies over cell ``i``.

Each setting is expressed as a plain sequential model so every attribution
method can be applied to it unchanged at any tap.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .attribution.maps import upsample_bilinear
from .attribution.methods import MethodConfig
from .explain import parse_method, attribute
from .nn.layers import (DTYPE, AvgPool2d, CellMerge, CellSplit, Conv2d, Flatten,
                        GlobalAvgPool, Linear, MaxPool2d, PointwiseLinear, RegionPool)
from .nn.model import Model, merge_batchnorm
from .nn.serialization import model_from_bytes, model_to_bytes

log = logging.getLogger(__name__)

SETTINGS = ("gridpg", "difull", "dipart")


def _setting(name):
    s = str(name).lower()
    if s not in SETTINGS:
        raise ValueError(f"unknown setting {name!r}; choose from {SETTINGS}")
    return s


# ----------------------------------------------------------------------------
# grids


@dataclass(eq=False)
class GridSample:
    """An ``n x n`` composite; ``targets`` are the cells that get explained."""

    composite: np.ndarray
    cells: tuple
    setting: str
    targets: tuple
    id: int
    n: int

    @property
    def labels(self):
        return tuple(c.label for c in self.cells)

    @property
    def cell_size(self):
        return self.cells[0].pixels.shape[1:]


def compose_grid(cells, n):
    c, h, w = cells[0].pixels.shape
    comp = np.empty((c, n * h, n * w), DTYPE)
    for i, cell in enumerate(cells):
        r, q = divmod(i, n)
        comp[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = cell.pixels
    return comp


def build_grids(pool, n=2, count=1, setting="gridpg", seed=0):
    """Sample ``count`` grids from ``pool`` (a list of LabeledImage).

    ``gridpg`` grids hold ``n*n`` distinct classes and are explained at
    every cell. ``difull``/``dipart`` grids repeat the top-left class in the
    bottom-right cell, keep the others distinct, and are explained at those
    two corners only. Grid ``i`` depends only on ``(seed, i)`` and the pool.
    """
    setting = _setting(setting)
    if n < 1:
        raise ValueError("n must be >= 1")
    by_class = {}
    for idx, im in enumerate(pool):
        by_class.setdefault(im.label, []).append(idx)
    classes = sorted(by_class)
    cells_n = n * n
    repeated = setting != "gridpg" and cells_n > 1
    need = cells_n - 1 if repeated else cells_n
    if len(classes) < need:
        raise ValueError(f"{setting} grids with n={n} need {need} distinct classes, "
                         f"pool has {len(classes)}")
    twice = [c for c in classes if len(by_class[c]) >= 2]
    if repeated and not twice:
        raise ValueError("no class has two distinct images for the repeated corner")
    grids = []
    for g in range(count):
        rng = np.random.default_rng([seed, g])
        if repeated:
            first = twice[rng.integers(len(twice))]
            rest = [c for c in classes if c != first]
            others = list(rng.choice(rest, need - 1, replace=False)) if need > 1 else []
            a, b = rng.choice(by_class[first], 2, replace=False)
            idxs = [a] + [rng.choice(by_class[c]) for c in others] + [b]
            targets = (0, cells_n - 1)
        else:
            chosen = rng.choice(classes, cells_n, replace=False)
            idxs = [rng.choice(by_class[c]) for c in chosen]
            targets = tuple(range(cells_n))
        cells = tuple(pool[int(i)] for i in idxs)
        grids.append(GridSample(compose_grid(cells, n), cells, setting, targets, g, n))
    return grids


# ----------------------------------------------------------------------------
# setting models


def _head(model):
    """Backbone layers and the ``(W, b)`` of a GAP + Linear head."""
    head = [l for l in model.layers[model.head_start:] if not isinstance(l, Flatten)]
    if len(head) != 2 or not isinstance(head[0], GlobalAvgPool) or not isinstance(head[1], Linear):
        kinds = [l.name for l in model.layers[model.head_start:]]
        raise ValueError(f"grid settings need a GlobalAvgPool + Linear head, got {kinds}")
    return model.layers[:model.head_start], head[1].weight, head[1].bias


def rf_geometry(layers):
    """``(start, jump)`` of the receptive-field centres after ``layers``.

    Output position ``u`` is centred on input coordinate ``start + u * jump``.
    """
    start, jump = 0.0, 1.0
    for layer in layers:
        if isinstance(layer, Conv2d):
            k, s, p = layer.weight.shape[2], layer.stride, layer.padding
        elif isinstance(layer, (MaxPool2d, AvgPool2d)):
            k, s, p = layer.k, layer.stride, 0
        else:
            continue
        start += ((k - 1) / 2 - p) * jump
        jump *= s
    return start, jump


def region_labels(layers, feature_hw, composite_hw, n):
    """Cell index per final-map position from its receptive-field centre.

    A centre exactly on a cell border goes to the earlier cell.
    """
    start, jump = rf_geometry(layers)

    def axis(m, size):
        cell = size / n
        centre = start + np.arange(m) * jump
        idx = np.ceil((centre + 0.5) / cell).astype(int) - 1
        return np.clip(idx, 0, n - 1)

    rows = axis(feature_hw[0], composite_hw[0])
    cols = axis(feature_hw[1], composite_hw[1])
    return rows[:, None] * n + cols[None, :]


def _tile_cells(batch, n):
    # (n*n, C, h, w) in row-major cell order -> (C, n*h, n*w)
    n2, c, h, w = batch.shape
    return batch.reshape(n, n, c, h, w).transpose(2, 0, 3, 1, 4).reshape(c, n * h, n * w)


def _untile_cells(x, n):
    c, hh, ww = x.shape
    h, w = hh // n, ww // n
    return x.reshape(c, n, h, n, w).transpose(1, 3, 0, 2, 4).reshape(n * n, c, h, w)


@dataclass(eq=False)
class SettingTask:
    """One composite viewed through a setting, split at a tap."""

    setting: str
    n: int
    tap: str
    tap_index: int
    explain: Model
    tap_input: np.ndarray
    num_classes: int
    composite_hw: tuple

    def target_index(self, cell, label):
        return int(label) if self.setting == "gridpg" else int(cell) * self.num_classes + int(label)

    def upsample(self, values):
        if self.setting != "difull":
            return upsample_bilinear(values, self.composite_hw)
        # per-cell, so disconnected cells stay exactly zero
        n = self.n
        h, w = values.shape[0] // n, values.shape[1] // n
        ch, cw = self.composite_hw[0] // n, self.composite_hw[1] // n
        out = np.empty(self.composite_hw, DTYPE)
        for r in range(n):
            for q in range(n):
                out[r * ch:(r + 1) * ch, q * cw:(q + 1) * cw] = upsample_bilinear(
                    values[r * h:(r + 1) * h, q * w:(q + 1) * w], (ch, cw))
        return out


def setting_model(model, setting, n, tap=0, composite_hw=None):
    """``(f_pre, f_explain)`` for a setting; ``f_pre`` maps a composite to the tap input.

    ``f_pre`` is a callable on one ``C x H x W`` composite.
    """
    setting = _setting(setting)
    backbone, w, b = _head(model)
    t = model.tap_index(tap)
    pre_layers, rest = backbone[:t], backbone[t:]
    k = w.shape[0]
    meta = {"setting": setting, "n": n, "tap_index": t}
    pre_model = Model(pre_layers)

    if setting == "gridpg":
        explain = Model(rest + [GlobalAvgPool(), Linear(w, b)], meta=meta)

        def f_pre(x):
            return pre_model(x[None])[0]
    elif setting == "dipart":
        if composite_hw is None:
            raise ValueError("dipart needs the composite size")
        shapes = Model(backbone).check_shapes((_in_channels(model),) + tuple(composite_hw))
        feat_hw = shapes[-1][1:]
        labels = region_labels(backbone, feat_hw, composite_hw, n)
        explain = Model(rest + [PointwiseLinear(w, b), RegionPool(labels)], meta=meta)

        def f_pre(x):
            return pre_model(x[None])[0]
    else:
        n2 = n * n
        wbig = np.zeros((n2 * k, n2 * w.shape[1]), DTYPE)
        for i in range(n2):
            wbig[i * k:(i + 1) * k, i * w.shape[1]:(i + 1) * w.shape[1]] = w
        bbig = None if b is None else np.tile(b, n2)
        explain = Model([CellSplit(n)] + rest + [GlobalAvgPool(), CellMerge(n), Linear(wbig, bbig)],
                        meta=meta)

        def f_pre(x):
            return _tile_cells(pre_model(_untile_cells(x, n)), n)
    return f_pre, explain


def _in_channels(model):
    if model.input_shape is not None:
        return model.input_shape[0]
    first = next(l for l in model.layers if isinstance(l, Conv2d))
    return first.weight.shape[1]


def prepare(model, composite, n, setting, tap=0):
    composite = np.asarray(composite, DTYPE)
    hw = composite.shape[1:]
    if hw[0] % n or hw[1] % n:
        raise ValueError(f"composite {hw} is not divisible into {n}x{n} cells")
    f_pre, explain = setting_model(model, setting, n, tap, hw)
    x = f_pre(composite)
    tap_name = tap if isinstance(tap, str) else str(tap)
    return SettingTask(_setting(setting), n, tap_name, model.tap_index(tap), explain, x,
                       _head(model)[1].shape[0], tuple(hw))


# ----------------------------------------------------------------------------


@dataclass
class SettingOutputs:
    """Per-cell logits, shape ``(n*n, num_classes)``."""

    logits: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits)):
            raise FloatingPointError("non-finite setting outputs")


def _eval(model, grid, setting):
    task = prepare(model, grid.composite, grid.n, setting, 0)
    out = task.explain(task.tap_input[None])[0]
    n2 = grid.n * grid.n
    if setting == "gridpg":
        return SettingOutputs(np.tile(out, (n2, 1)))
    return SettingOutputs(out.reshape(n2, -1))


def eval_gridpg(model, grid):
    return _eval(model, grid, "gridpg")


def eval_difull(model, grid):
    return _eval(model, grid, "difull")


def eval_dipart(model, grid):
    return _eval(model, grid, "dipart")


# ----------------------------------------------------------------------------
# localization score


@dataclass
class LocalizationRecord:
    sample_id: int
    method: str
    tap: str
    setting: str
    target_cell: int
    score: float
    numerator: float

    def key(self):
        return (self.setting, self.sample_id, self.target_cell, self.tap, self.method)


def cell_positive_sums(values, n):
    """Positive mass per cell (row-major), accumulated in float64."""
    v = np.maximum(np.asarray(values, np.float64), 0)
    h, w = v.shape[0] // n, v.shape[1] // n
    return v.reshape(n, h, n, w).sum(axis=(1, 3)).reshape(-1)


def localization_score(amap, grid, target_cell, method="", tap="", setting=None):
    """Share of positive attribution inside ``target_cell``; 0 without positive mass.

    ``amap`` is an AttributionMap (its full-resolution view is used) or a
    2-D array at composite resolution. ``grid`` is a GridSample or ``n``.
    """
    values = amap.full() if hasattr(amap, "full") else np.asarray(amap)
    if isinstance(grid, GridSample):
        n, sid, setting = grid.n, grid.id, setting or grid.setting
        expected = grid.composite.shape[1:]
        if tuple(values.shape) != tuple(expected):
            raise ValueError(f"map {values.shape} does not match composite {expected}")
    else:
        n, sid = int(grid), -1
        if values.shape[0] % n or values.shape[1] % n:
            raise ValueError(f"map {values.shape} not divisible into {n}x{n} cells")
    if not 0 <= target_cell < n * n:
        raise IndexError(f"target cell {target_cell} outside {n}x{n} grid")
    sums = cell_positive_sums(values, n)
    total = math.fsum(sums)
    num = float(sums[target_cell])
    score = num / total if total > 0 else 0.0
    return LocalizationRecord(sid, method, str(tap), setting or "", int(target_cell),
                              min(score, 1.0), num)


# ----------------------------------------------------------------------------
# campaigns


def record_seed(seed, sample_id, target, method, tap, setting=""):
    words = [int(seed) & 0xFFFFFFFF, int(sample_id), int(target)] + \
        [zlib.crc32(str(s).encode()) for s in (method, tap, setting)]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class CampaignResult:
    records: list
    maps: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def expand_taps(model, taps):
    if taps == "all" or taps == ["all"]:
        return [str(i) for i in range(model.head_start + 1)]
    return [str(t) for t in taps]


def _grid_jobs(model, grid, setting, taps, methods, config, seed, keep_maps, skip):
    records, maps, failures = [], {}, []
    for tap in taps:
        try:
            task = prepare(model, grid.composite, grid.n, setting, tap)
        except Exception as exc:  # noqa: BLE001 - reported, campaign continues
            failures.append((setting, grid.id, None, tap, None, repr(exc)))
            continue
        at_input = task.tap_index == 0
        for cell in grid.targets:
            target = task.target_index(cell, grid.cells[cell].label)
            for method in methods:
                key = (setting, grid.id, cell, tap, method)
                if key in skip:
                    continue
                try:
                    rs = record_seed(seed, grid.id, cell, method, tap, setting)
                    amap = attribute(method, task.explain, task.tap_input, target, config,
                                     at_input=at_input, seed=rs, tap=tap)
                    amap.upsampled = task.upsample(amap.values)
                    amap.sample_id = grid.id
                    rec = localization_score(amap, grid, cell, method, tap, setting)
                    amap.positive_mass_target = rec.numerator
                except Exception as exc:  # noqa: BLE001
                    failures.append((setting, grid.id, cell, tap, method, repr(exc)))
                    continue
                records.append(rec)
                if keep_maps:
                    maps[key] = amap
    return records, maps, failures


_WORKER = {}


def _init_worker(model_bytes):
    _WORKER["model"] = model_from_bytes(model_bytes)


def _run_chunk(args):
    return [_grid_jobs(_WORKER["model"], *a) for a in args]


def run_campaign(model, methods, taps, settings, grids, config=None, seed=0, workers=1,
                 keep_maps=False, skip=frozenset(), progress=None):
    """Evaluate every (setting, grid, target, tap, method) combination.

    ``grids`` maps a setting to its grids (a plain list is used for all
    settings). Records come back sorted by key whatever ``workers`` is.
    Keys in ``skip`` are not recomputed. BatchNorm is merged before anything
    runs, so integer taps index the merged model.
    """
    config = config or MethodConfig()
    methods = list(methods)
    for m in methods:
        parse_method(m)
    model = merge_batchnorm(model)
    taps = expand_taps(model, taps)
    for t in taps:
        model.tap_index(t)
    units = []
    for setting in settings:
        setting = _setting(setting)
        gl = grids[setting] if isinstance(grids, dict) else grids
        for g in gl:
            units.append((g, setting, taps, methods, config, seed, keep_maps, skip))
    result = CampaignResult([])
    if workers <= 1 or len(units) <= 1:
        outputs = []
        for i, u in enumerate(units):
            outputs.append(_grid_jobs(model, *u))
            if progress:
                progress(i + 1, len(units))
    else:
        size = max(1, math.ceil(len(units) / (workers * 4)))
        chunks = [units[i:i + size] for i in range(0, len(units), size)]
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(model_to_bytes(model),)) as ex:
            outputs = [o for part in ex.map(_run_chunk, chunks) for o in part]
    for recs, maps, fails in outputs:
        result.records.extend(recs)
        result.maps.update(maps)
        result.failures.extend(fails)
    result.records.sort(key=LocalizationRecord.key)
    for f in result.failures:
        log.warning("sample failed: setting=%s grid=%s cell=%s tap=%s method=%s: %s", *f)
    return result


# ----------------------------------------------------------------------------
# record files

RECORD_FIELDS = ("sample_id", "method", "tap", "setting", "target_cell", "score", "numerator")


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.sample_id, r.method, r.tap, r.setting, r.target_cell,
                        repr(float(r.score)), repr(float(r.numerator))])


def read_records_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LocalizationRecord(int(r["sample_id"]), r["method"], r["tap"], r["setting"],
                               int(r["target_cell"]), float(r["score"]), float(r["numerator"]))
            for r in rows]


def write_records_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_records_jsonl(path):
    with open(path) as fh:
        return [LocalizationRecord(**json.loads(line)) for line in fh if line.strip()]


__all__ = [
    "SETTINGS", "GridSample", "compose_grid", "build_grids", "rf_geometry", "region_labels",
    "SettingTask", "setting_model", "prepare", "SettingOutputs", "eval_gridpg",
    "eval_difull", "eval_dipart", "LocalizationRecord", "cell_positive_sums",
    "localization_score", "record_seed", "CampaignResult", "expand_taps", "run_campaign",
    "write_records_csv", "read_records_csv", "write_records_jsonl", "read_records_jsonl",
]
