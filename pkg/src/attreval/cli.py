"""Command-line driver.

Subcommands: ``train``, ``evaluate``, ``aggatt``, ``correlate``, ``implinv``
and ``gamma-sweep``. Every option can also come from a YAML file passed with
``--config``; keys are the long option names with ``-`` replaced by ``_``.
Explicit flags override the file, which overrides the built-in defaults.
The effective configuration is written to ``config.yaml`` in the output
directory, minus the keys that cannot change results (``workers``, ``out``,
``cache``).

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import aggatt as agg
from .analysis import (Degenerate, correlation_matrix, emit_report, quartiles,
                       series_from_records)
from .attribution.maps import load_map, save_map
from .attribution.methods import MethodConfig
from .data import filter_confident, gen_synthetic, load_cifar10, stack
from .explain import parse_method
from .grids import (SETTINGS, LocalizationRecord, build_grids, expand_taps, localization_score,
                    prepare, read_records_csv, run_campaign, write_records_csv,
                    write_records_jsonl)
from .lrp import GAMMAS, LrpConfig, gamma_sweep, implinv_transform, lrp_attr
from .nn.errors import ModelFormatError, TrainingDivergedError
from .nn.model import merge_batchnorm
from .nn.presets import PRESETS, build_preset
from .nn.serialization import load_model, model_hash, save_model
from .nn.training import accuracy, train_sgd
from .recipes import POOL_START, RECIPES, TEST_START

log = logging.getLogger("attreval")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "common": {"seed": None, "out": "out", "workers": 1, "log_level": "INFO"},
    "train": {"arch": "tinyvgg-plain", "data": "synthetic", "data_path": None,
              "test_path": None, "train_count": 5000, "test_count": 1000, "data_seed": 0,
              "epochs": None, "lr": None, "batch_size": None, "momentum": 0.9,
              "weight_decay": 0.0, "min_accuracy": 0.0},
    "evaluate": {"model": None, "data": "synthetic", "data_path": None, "data_seed": 0,
                 "pool_size": 1000, "confidence": 0.99, "methods": ["ixg"],
                 "taps": ["input"], "settings": ["gridpg"], "n": 2, "count": 10,
                 "lrp": None, "save_maps": False, "cache": None, "method_config": {}},
    "aggatt": {"run": None, "mode": "diverging", "setting": None},
    "correlate": {"run": None, "setting": "gridpg", "series": None},
    "implinv": {"model": None, "data": "synthetic", "data_path": None, "data_seed": 0,
                "pool_size": 1000, "confidence": 0.99, "count": 100, "n": 2, "tap": "input"},
    "gamma-sweep": {"model": None, "data": "synthetic", "data_path": None, "data_seed": 0,
                    "pool_size": 1000, "confidence": 0.99, "count": 200, "n": 2,
                    "taps": ["input", "mid", "final"], "gammas": None},
}
RUNTIME_ONLY = ("workers", "out", "cache", "log_level", "config")


def _csv_list(s):
    return [x for x in (p.strip() for p in s.split(",")) if x]


def build_parser():
    p = argparse.ArgumentParser(prog="attreval", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", default=S, help="YAML file with option values")
        sp.add_argument("--seed", type=int, default=S,
                        help="global seed (falls back to $ATTREVAL_SEED, then 0)")
        sp.add_argument("--out", default=S, help="output directory (or file for train)")
        sp.add_argument("--workers", type=int, default=S)
        sp.add_argument("--log-level", default=S)

    def data(sp):
        sp.add_argument("--data", choices=["synthetic", "cifar10"], default=S)
        sp.add_argument("--data-path", default=S, help="CIFAR-10 binary batch")
        sp.add_argument("--data-seed", type=int, default=S)
        sp.add_argument("--pool-size", type=int, default=S)
        sp.add_argument("--confidence", type=float, default=S)

    t = sub.add_parser("train", help="train a preset architecture")
    common(t)
    t.add_argument("--arch", choices=PRESETS, default=S)
    t.add_argument("--data", choices=["synthetic", "cifar10"], default=S)
    t.add_argument("--data-path", default=S)
    t.add_argument("--test-path", default=S)
    t.add_argument("--data-seed", type=int, default=S)
    t.add_argument("--train-count", type=int, default=S)
    t.add_argument("--test-count", type=int, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--batch-size", type=int, default=S)
    t.add_argument("--momentum", type=float, default=S)
    t.add_argument("--weight-decay", type=float, default=S)
    t.add_argument("--min-accuracy", type=float, default=S,
                   help="fail with exit 2 if held-out accuracy is lower")

    e = sub.add_parser("evaluate", help="run a localization campaign")
    common(e)
    data(e)
    e.add_argument("--model", default=S)
    e.add_argument("--methods", type=_csv_list, default=S)
    e.add_argument("--taps", type=_csv_list, default=S, help="names, layer indices or 'all'")
    e.add_argument("--settings", type=_csv_list, default=S)
    e.add_argument("--n", type=int, default=S)
    e.add_argument("--count", type=int, default=S, help="grids per setting")
    e.add_argument("--lrp", default=S, help="add an LRP preset, e.g. focus or composite:0.25")
    e.add_argument("--save-maps", action="store_true", default=S)
    e.add_argument("--cache", default=S, help="record cache file (default OUT/cache.jsonl)")
    for f in MethodConfig.__dataclass_fields__:
        e.add_argument("--" + f.replace("_", "-"), dest="mc_" + f, default=S,
                       type=float if "frac" in f or "baseline" in f or "prob" in f else int)

    a = sub.add_parser("aggatt", help="bin and render maps of an evaluate run")
    common(a)
    a.add_argument("--run", default=S, help="output directory of evaluate --save-maps")
    a.add_argument("--mode", choices=["diverging", "positive"], default=S)
    a.add_argument("--setting", default=S)

    c = sub.add_parser("correlate", help="Spearman matrix of an evaluate run")
    common(c)
    c.add_argument("--run", default=S)
    c.add_argument("--setting", default=S)
    c.add_argument("--series", type=_csv_list, default=S, help="method@tap,... (default: all)")

    i = sub.add_parser("implinv", help="implementation-invariance demonstration")
    common(i)
    data(i)
    i.add_argument("--model", default=S)
    i.add_argument("--count", type=int, default=S)
    i.add_argument("--n", type=int, default=S)

    g = sub.add_parser("gamma-sweep", help="composite LRP localization per gamma")
    common(g)
    data(g)
    g.add_argument("--model", default=S)
    g.add_argument("--count", type=int, default=S)
    g.add_argument("--n", type=int, default=S)
    g.add_argument("--taps", type=_csv_list, default=S)
    g.add_argument("--gammas", type=_csv_list, default=S)
    return p


def effective_config(args):
    cmd = args.command
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[cmd])
    flags = vars(args).copy()
    flags.pop("command")
    cfg_path = flags.pop("config", None)
    if cfg_path:
        try:
            loaded = yaml.safe_load(Path(cfg_path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a mapping")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(loaded)
    mc = dict(cfg.get("method_config") or {}) if "method_config" in cfg else None
    for k, v in flags.items():
        if k.startswith("mc_"):
            mc[k[3:]] = v
        else:
            cfg[k] = v
    if mc is not None:
        cfg["method_config"] = mc
    if cfg["seed"] is None:
        env = os.environ.get("ATTREVAL_SEED")
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"ATTREVAL_SEED must be an integer, got {env!r}") from None
    if int(cfg["workers"]) < 1:
        raise UsageError("--workers must be >= 1")
    return cfg


def echo_config(cfg, out_dir, command):
    doc = {k: v for k, v in cfg.items() if k not in RUNTIME_ONLY}
    doc["command"] = command
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _require_path(cfg, key):
    _require(cfg, key)
    if not Path(cfg[key]).exists():
        raise UsageError(f"{key.replace('_', '-')} {cfg[key]} does not exist")


# ----------------------------------------------------------------------------
# data helpers


def _pool(cfg, model):
    if cfg["data"] == "cifar10":
        _require_path(cfg, "data_path")
        images = load_cifar10(cfg["data_path"])
    else:
        images = gen_synthetic(int(cfg["pool_size"]), seed=int(cfg["data_seed"]), start=POOL_START)
    pool = filter_confident(model, images, float(cfg["confidence"]))
    log.info("%d of %d pool images pass the %.2f confidence filter", len(pool), len(images),
             float(cfg["confidence"]))
    return pool


# ----------------------------------------------------------------------------
# subcommands


def cmd_train(cfg):
    arch = cfg["arch"]
    rec = RECIPES.get(arch, {})
    params = {k: cfg[k] if cfg[k] is not None else rec.get(k)
              for k in ("epochs", "lr", "batch_size")}
    if None in params.values():
        raise UsageError(f"no recipe for {arch}; pass --epochs, --lr and --batch-size")
    seed = int(cfg["seed"])
    if cfg["data"] == "cifar10":
        _require_path(cfg, "data_path")
        train = load_cifar10(cfg["data_path"])
        test = load_cifar10(cfg["test_path"]) if cfg.get("test_path") else []
    else:
        train = gen_synthetic(int(cfg["train_count"]), seed=int(cfg["data_seed"]))
        test = gen_synthetic(int(cfg["test_count"]), seed=int(cfg["data_seed"]), start=TEST_START)
    x, y = stack(train)
    init = build_preset(arch, seed=seed, input_size=x.shape[2])
    model, train_acc = train_sgd(init, x, y, seed=seed, momentum=float(cfg["momentum"]),
                                 weight_decay=float(cfg["weight_decay"]), **params)
    test_acc = accuracy(model, *stack(test)) if test else None
    out = Path(cfg["out"])
    if out.suffix != ".atev":
        out = out / f"{arch}.atev"
    save_model(model, out)
    metrics = {"arch": arch, "seed": seed, "train_accuracy": train_acc,
               "test_accuracy": test_acc, "sha256": model_hash(model), **params}
    out.with_suffix(".json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    echo_config(cfg, out.parent, "train")
    print(f"train accuracy {train_acc:.4f}" +
          (f"  held-out accuracy {test_acc:.4f}" if test_acc is not None else ""))
    print(f"wrote {out}")
    if test_acc is not None and test_acc < float(cfg["min_accuracy"]):
        log.error("held-out accuracy %.4f below --min-accuracy %.4f", test_acc,
                  float(cfg["min_accuracy"]))
        return 2
    return 0


def _method_list(cfg):
    methods = list(cfg["methods"] or [])
    if cfg.get("lrp"):
        methods.append("lrp-" + LrpConfig.parse(cfg["lrp"]).name)
    for m in methods:
        try:
            parse_method(m)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return methods


def _map_name(key):
    setting, sid, cell, tap, method = key
    safe = method.replace(":", "_")
    return f"{setting}/{safe}/{tap}/{sid:06d}_{cell}.atmp"


def _cache_key(mhash, cfg_digest, key):
    return hashlib.sha256(json.dumps([mhash, cfg_digest, list(key)]).encode()).hexdigest()


def cmd_evaluate(cfg):
    _require_path(cfg, "model")
    model = load_model(cfg["model"])
    methods = _method_list(cfg)
    settings = [s.lower() for s in cfg["settings"]]
    for s in settings:
        if s not in SETTINGS:
            raise UsageError(f"unknown setting {s}; choose from {SETTINGS}")
    try:
        mcfg = MethodConfig.from_dict(cfg.get("method_config") or {})
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad method config: {exc}") from None
    taps = cfg["taps"]
    taps = "all" if taps in ("all", ["all"]) else [str(t) for t in taps]
    merged = merge_batchnorm(model)
    try:
        for t in (taps if taps != "all" else []):
            merged.tap_index(t)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, "evaluate")

    pool = _pool(cfg, model)
    seed = int(cfg["seed"])
    grids = {s: build_grids(pool, int(cfg["n"]), int(cfg["count"]), s, seed) for s in settings}

    # results-affecting inputs, hashed into every cache key
    digest_src = {k: cfg.get(k) for k in ("data", "data_path", "data_seed", "pool_size",
                                           "confidence", "n", "seed", "method_config")}
    cfg_digest = hashlib.sha256(json.dumps(digest_src, sort_keys=True, default=str)
                                .encode()).hexdigest()
    mhash = model_hash(model)
    cache_path = Path(cfg["cache"]) if cfg.get("cache") else out / "cache.jsonl"
    cached = {}
    if cache_path.exists():
        for line in cache_path.read_text().splitlines():
            if line.strip():
                entry = json.loads(line)
                cached[entry["key"]] = entry["record"]
    all_taps = expand_taps(merged, taps)
    skip, reused = set(), []
    for s in settings:
        for g in grids[s]:
            for tap in all_taps:
                for cell in g.targets:
                    for m in methods:
                        key = (s, g.id, cell, tap, m)
                        ck = _cache_key(mhash, cfg_digest, key)
                        if ck in cached and (not cfg["save_maps"] or
                                             (out / "maps" / _map_name(key)).exists()):
                            skip.add(key)
                            reused.append(LocalizationRecord(**cached[ck]))
    result = run_campaign(model, methods, all_taps, settings, grids, mcfg, seed,
                          int(cfg["workers"]), keep_maps=bool(cfg["save_maps"]),
                          skip=frozenset(skip))
    new = result.records
    with open(cache_path, "a") as fh:
        for r in new:
            ck = _cache_key(mhash, cfg_digest, r.key())
            fh.write(json.dumps({"key": ck, "record": r.__dict__}, sort_keys=True) + "\n")
    if cfg["save_maps"]:
        for key, amap in sorted(result.maps.items()):
            save_map(amap, out / "maps" / _map_name(key), setting=key[0], target_cell=key[2])
    records = sorted(new + reused, key=LocalizationRecord.key)
    write_records_csv(records, out / "records.csv")
    write_records_jsonl(records, out / "records.jsonl")
    emit_report(records, out)
    total = len(records) + len(result.failures)
    print(f"{len(records)} records ({len(reused)} from cache), {len(result.failures)} failures")
    if total and not records:
        log.error("every sample failed")
        return 2
    return 0


def cmd_aggatt(cfg):
    _require_path(cfg, "run")
    run = Path(cfg["run"])
    if not (run / "records.csv").exists():
        raise UsageError(f"{run} has no records.csv")
    records = read_records_csv(run / "records.csv")
    if cfg.get("setting"):
        records = [r for r in records if r.setting == cfg["setting"]]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, "aggatt")
    if not records:
        log.warning("no records to aggregate")
        return 0
    groups = {}
    for r in records:
        groups.setdefault((r.setting, r.method, r.tap), []).append(r)
    summary = {}
    for (setting, method, tap), recs in sorted(groups.items()):
        maps = {}
        for r in recs:
            path = run / "maps" / _map_name((setting, r.sample_id, r.target_cell, tap, method))
            if not path.exists():
                raise FileNotFoundError(f"missing map {path}; run evaluate with --save-maps")
            maps[agg.record_id(r)] = load_map(path)
        result = agg.sort_and_bin(recs, maps)
        label = f"{method}@{tap}/{setting}"
        dest = out / setting / method.replace(":", "_") / tap
        agg.write_aggatt(result, dest, cfg["mode"], label)
        summary[label] = {"sizes": result.sizes(), "normalizer": result.normalizer}
    (out / "aggatt.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"rendered {len(groups)} groups into {out}")
    return 0


def cmd_correlate(cfg):
    _require_path(cfg, "run")
    records = read_records_csv(Path(cfg["run"]) / "records.csv")
    setting = cfg["setting"]
    records = [r for r in records if r.setting == setting]
    if cfg.get("series"):
        pairs = []
        for s in cfg["series"]:
            method, sep, tap = s.rpartition("@")
            if not sep:
                raise UsageError(f"series {s!r} must look like method@tap")
            pairs.append((method, tap))
    else:
        pairs = sorted({(r.method, r.tap) for r in records})
    series = [series_from_records(records, m, t, setting) for m, t in pairs]
    for s in series:
        if not s.items:
            raise RuntimeError(f"no records for {s.label}")
    mat = correlation_matrix(series)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, "correlate")
    mat.to_csv(out / "correlation.csv")
    degenerate = sum(isinstance(v, Degenerate) for row in mat.values for v in row)
    print(f"{len(series)}x{len(series)} Spearman matrix written"
          + (f" ({degenerate} degenerate entries)" if degenerate else ""))
    return 0


def cmd_implinv(cfg):
    _require_path(cfg, "model")
    model = merge_batchnorm(load_model(cfg["model"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, "implinv")
    pool = _pool(cfg, model)
    n = int(cfg["n"])
    grids = build_grids(pool, n, int(cfg["count"]), "difull", int(cfg["seed"]))
    before, after, max_delta = [], [], 0.0
    for gi, g in enumerate(grids):
        task = prepare(model, g.composite, n, "difull", cfg["tap"])
        transformed = implinv_transform(task.explain)
        x = task.tap_input[None]
        max_delta = max(max_delta, float(np.abs(task.explain(x) - transformed(x)).max()))
        for cell in g.targets:
            target = task.target_index(cell, g.cells[cell].label)
            for bucket, m in ((before, task.explain), (after, transformed)):
                amap = lrp_attr(m, task.tap_input, target, "zplus", tap=cfg["tap"])
                amap.upsampled = task.upsample(amap.values)
                bucket.append(localization_score(amap, g, cell).score)
                if gi == 0 and cell == g.targets[0]:
                    name = "before" if bucket is before else "after"
                    vals = amap.upsampled
                    norm = float(np.abs(vals).max())
                    agg.render_heatmap(vals, norm if norm > 0 else 1.0, "diverging",
                                       out / f"heatmap_{name}.ppm")
    report = {"grids": len(grids), "max_abs_logit_delta": max_delta,
              "localization_before": quartiles(before)._asdict(),
              "localization_after": quartiles(after)._asdict()}
    (out / "implinv.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"max |logit delta| = {max_delta:.3g}")
    print(f"median ZPlus localization: before {report['localization_before']['median']:.4f}"
          f"  after {report['localization_after']['median']:.4f}")
    return 0


def cmd_gamma_sweep(cfg):
    _require_path(cfg, "model")
    model = load_model(cfg["model"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, "gamma-sweep")
    pool = _pool(cfg, model)
    grids = build_grids(pool, int(cfg["n"]), int(cfg["count"]), "gridpg", int(cfg["seed"]))
    gammas = [float(g) for g in cfg["gammas"]] if cfg.get("gammas") else list(GAMMAS)
    table = gamma_sweep(model, grids, gammas, cfg["taps"], int(cfg["seed"]), int(cfg["workers"]))
    lines = ["gamma,tap,min,q1,median,q3,max"]
    for g in gammas:
        for t in cfg["taps"]:
            q = table[g][t]
            lines.append(",".join([repr(g), t] + [repr(v) for v in q]))
    (out / "gamma_sweep.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "aggatt": cmd_aggatt,
            "correlate": cmd_correlate, "implinv": cmd_implinv, "gamma-sweep": cmd_gamma_sweep}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = effective_config(args)
        logging.basicConfig(level=str(cfg["log_level"]).upper(), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"attreval: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, ModelFormatError, FileNotFoundError, RuntimeError,
            ValueError, KeyError) as exc:
        print(f"attreval: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
