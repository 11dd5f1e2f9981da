"""Acceptance suite: one test per criterion, summarised at the end of the run.

Every test is tagged with ``@pytest.mark.criterion(number, title)``; the
conftest hooks print a PASS/FAIL line per criterion after the session.
Campaign sizes follow the criteria; expect roughly fifteen minutes on one core.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from attreval.aggatt import sort_and_bin
from attreval.analysis import Degenerate, series_from_records, spearman
from attreval.attribution import MethodConfig
from attreval.attribution.methods import intgrad_attr
from attreval.cli import main
from attreval.grids import LocalizationRecord, build_grids, localization_score, run_campaign
from attreval.lrp import LrpConfig, gamma_sweep, lrp_attr, lrp_relevances
from attreval.nn import BatchNorm2d
from attreval.nn.gradcheck import check_layer
from conftest import layer_cases

pytestmark = pytest.mark.slow

GRIDPG_COUNT = 125  # x 4 targets = 500 samples


def _median(values):
    return float(np.median(values))


def _scores(records, method, tap, setting=None):
    return [r.score for r in records
            if r.method == method and r.tap == tap and (setting is None or r.setting == setting)]


def _off_target_mask(n, size, cell):
    mask = np.ones((size, size), bool)
    c = size // n
    r, q = divmod(cell, n)
    mask[r * c:(r + 1) * c, q * c:(q + 1) * c] = False
    return mask


@pytest.fixture(scope="module")
def gridpg_plain(plain_model, plain_pool):
    grids = build_grids(plain_pool, 2, GRIDPG_COUNT, "gridpg", seed=0)
    base = run_campaign(plain_model, ["ixg", "intgrad", "gradcam"], ["input", "final"],
                        ["gridpg"], grids).records
    smooth = run_campaign(plain_model, ["s-ixg:17", "s-intgrad:17"], ["input"], ["gridpg"],
                          grids).records
    return base + smooth


# ---------------------------------------------------------------- 1


@pytest.mark.criterion(1, "DiFull backprop methods localize perfectly with bit-zero leakage")
def test_difull_ground_truth(plain_model, plain_pool, detail):
    methods = ["gradient", "guided_backprop", "ixg", "intgrad", "layercam"]
    grids = build_grids(plain_pool, 2, 200, "difull", seed=0)
    count, imperfect, leaks = 0, [], 0
    for start in range(0, len(grids), 20):
        res = run_campaign(plain_model, methods, ["input", "mid", "final"], ["difull"],
                           grids[start:start + 20], keep_maps=True)
        assert not res.failures
        count += len(res.records)
        imperfect += [r.key() for r in res.records if r.score != 1.0]
        for (_, _, cell, _, _), amap in res.maps.items():
            full = amap.full()
            leaks += int(np.count_nonzero(full[_off_target_mask(2, full.shape[0], cell)]))
    detail(f"{count} records, {len(imperfect)} below 1.0, {leaks} nonzero off-target pixels")
    assert count == 200 * 2 * 3 * len(methods)
    assert not imperfect
    assert leaks == 0


# ---------------------------------------------------------------- 2


def _occlusion_zero_mask(size, n, cell, k, stride):
    """Pixels covered only by windows that avoid the target cell."""
    c = size // n
    r, q = divmod(cell, n)
    covered_bad = np.zeros((size, size), bool)
    covered = np.zeros((size, size), bool)
    for y in range(0, size - k + 1, stride):
        for x in range(0, size - k + 1, stride):
            touches = (y < (r + 1) * c and y + k > r * c and x < (q + 1) * c and x + k > q * c)
            covered[y:y + k, x:x + k] = True
            if touches:
                covered_bad[y:y + k, x:x + k] = True
    return covered & ~covered_bad


@pytest.mark.criterion(2, "Occlusion on DiFull: exact zeros off target, median >= 0.95")
def test_difull_occlusion(plain_model, plain_pool, detail):
    grids = build_grids(plain_pool, 2, 50, "difull", seed=0)
    res = run_campaign(plain_model, ["occlusion"], ["input"], ["difull"], grids,
                       MethodConfig(occlusion_k=8, occlusion_stride=4), keep_maps=True)
    nonzero = 0
    for (_, _, cell, _, _), amap in res.maps.items():
        full = amap.full()
        nonzero += int(np.count_nonzero(full[_occlusion_zero_mask(full.shape[0], 2, cell, 8, 4)]))
    med = _median([r.score for r in res.records])
    detail(f"median {med:.4f} over {len(res.records)} records, {nonzero} nonzero pixels")
    assert len(res.records) == 100
    assert nonzero == 0
    assert med >= 0.95


# ---------------------------------------------------------------- 3


@pytest.mark.criterion(3, "Grad-CAM fails on repeated classes in DiFull")
def test_gradcam_repeated_class(plain_model, plain_pool, detail):
    grids = {s: build_grids(plain_pool, 2, 200, s, seed=0) for s in ("difull", "gridpg")}
    recs = run_campaign(plain_model, ["gradcam"], ["final"], ["difull", "gridpg"], grids).records
    difull = _median(_scores(recs, "gradcam", "final", "difull"))
    gridpg = _median(_scores(recs, "gradcam", "final", "gridpg"))
    detail(f"DiFull median {difull:.4f}, GridPG median {gridpg:.4f}")
    assert difull <= 0.75
    assert difull < gridpg


# ---------------------------------------------------------------- 4


@pytest.mark.criterion(4, "GridPG localization improves from input to final tap")
def test_depth_trend(gridpg_plain, detail):
    gains = {}
    for m in ("ixg", "intgrad", "gradcam"):
        gains[m] = (np.mean(_scores(gridpg_plain, m, "final"))
                    - np.mean(_scores(gridpg_plain, m, "input")))
    detail(", ".join(f"{m} +{g:.3f}" for m, g in gains.items()))
    assert all(g >= 0.05 for g in gains.values())


# ---------------------------------------------------------------- 5


@pytest.mark.criterion(5, "Smoothing helps IxG on the plain model more than with BatchNorm")
def test_smoothing_effect(gridpg_plain, bn_model, bn_pool, detail):
    plain_gain = (_median(_scores(gridpg_plain, "s-ixg:17", "input"))
                  - _median(_scores(gridpg_plain, "ixg", "input")))
    grids = build_grids(bn_pool, 2, GRIDPG_COUNT, "gridpg", seed=0)
    bn = run_campaign(bn_model, ["ixg", "s-ixg:17"], ["input"], ["gridpg"], grids).records
    bn_gain = _median(_scores(bn, "s-ixg:17", "input")) - _median(_scores(bn, "ixg", "input"))
    detail(f"plain gain {plain_gain:+.3f}, bn gain {bn_gain:+.3f}")
    assert plain_gain >= 0.05
    assert bn_gain < plain_gain


# ---------------------------------------------------------------- 6


@pytest.mark.criterion(6, "IntGrad completeness on the bias-free model")
def test_intgrad_completeness(nobias_model, detail):
    xs = np.random.default_rng(0).uniform(0, 1, (100, 3, 32, 32)).astype(np.float32)
    logits = nobias_model(xs)
    base = nobias_model(np.zeros_like(xs[:1]))[0]
    errors = []
    for x, out in zip(xs, logits):
        target = int(out.argmax())
        raw = intgrad_attr(nobias_model, x, target, steps=128, raw=True)
        delta = float(out[target]) - float(base[target])
        errors.append(abs(float(raw.sum(dtype=np.float64)) - delta) / abs(delta))
    detail(f"max relative error {max(errors):.2e}")
    assert max(errors) < 0.05


# ---------------------------------------------------------------- 7


@pytest.mark.criterion(7, "Every layer backward kernel matches finite differences")
def test_gradient_correctness(detail):
    results = []
    for _, layer, x in layer_cases():
        results += check_layer(layer, x)
    rng = np.random.default_rng(1)
    bn = BatchNorm2d(rng.uniform(0.5, 2, 3), rng.standard_normal(3), np.zeros(3), np.ones(3))
    results += check_layer(bn, rng.standard_normal((4, 3, 3, 3)), train=True)
    worst = max(results, key=lambda r: r.max_rel_error)
    detail(f"{len(results)} checks, worst {worst.layer}/{worst.wrt} {worst.max_rel_error:.1e}")
    assert all(r.ok(1e-3) for r in results)


# ---------------------------------------------------------------- 8


@pytest.mark.criterion(8, "ZPlus conserves relevance; Composite(0) equals the epsilon configuration")
def test_lrp_conservation(nobias_model, plain_model, plain_pool, detail):
    xs = np.random.default_rng(0).uniform(0, 1, (100, 3, 32, 32)).astype(np.float32)
    worst = 0.0
    for x, out in zip(xs, nobias_model(xs)):
        target = int(out.argmax())
        logit = float(out[target])
        for rel in lrp_relevances(nobias_model, x, target, LrpConfig.zplus()):
            worst = max(worst, abs(float(rel.sum(dtype=np.float64)) - logit) / abs(logit))
    diff = 0.0
    for im in plain_pool[:100]:
        a = lrp_attr(plain_model, im.pixels, im.label, LrpConfig.composite(0.0)).values
        b = lrp_attr(plain_model, im.pixels, im.label, LrpConfig.epsilon_conv(1e-6)).values
        diff = max(diff, float(np.max(np.abs(a - b))))
    detail(f"worst conservation error {worst:.1e}, max composite difference {diff:.1e}")
    assert worst <= 1e-3
    assert diff <= 1e-6


# ---------------------------------------------------------------- 9


@pytest.mark.criterion(9, "Composite LRP localizes at least as well at gamma 0.25 as at 0")
def test_gamma_direction(plain_model, plain_pool, detail):
    grids = build_grids(plain_pool, 2, 200, "gridpg", seed=0)
    table = gamma_sweep(plain_model, grids, [0.0, 0.25], ["input"])
    low, high = table[0.0]["input"].median, table[0.25]["input"].median
    detail(f"median gamma=0 {low:.4f}, gamma=0.25 {high:.4f}")
    assert high >= low


# ---------------------------------------------------------------- 10


@pytest.mark.criterion(10, "Implementation-invariant rewrite keeps logits but breaks ZPlus")
def test_implinv(plain_model, trained, tmp_path, detail):
    out = tmp_path / "implinv"
    assert main(["implinv", "--model", str(trained.path("tinyvgg-plain")), "--out", str(out),
                 "--count", "100", "--log-level", "WARNING"]) == 0
    report = json.loads((out / "implinv.json").read_text())
    before = report["localization_before"]["median"]
    after = report["localization_after"]["median"]
    delta = report["max_abs_logit_delta"]
    detail(f"{report['grids']} grids, logit delta {delta:.1e}, median {before:.4f} -> {after:.4f}")
    assert report["grids"] >= 100
    assert delta <= 1e-4
    assert before >= 0.99
    assert after <= 0.5


# ---------------------------------------------------------------- 11


@pytest.mark.criterion(11, "Localization score and AggAtt binning unit checks")
def test_score_units(detail):
    assert localization_score(np.ones((64, 64)), 2, 0).score == 0.25
    assert localization_score(-np.ones((64, 64)), 2, 0).score == 0.0
    v = np.random.default_rng(0).standard_normal((64, 64))
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert math.isclose(localization_score(v * c, 2, 1).score,
                            localization_score(v, 2, 1).score, rel_tol=1e-9)
    recs = [LocalizationRecord(i, "m", "input", "gridpg", 0, i / 100, 0.0) for i in range(100)]
    sizes = sort_and_bin(recs).sizes()
    detail(f"bins {sizes}")
    assert sizes == [2, 3, 45, 45, 3, 2]


# ---------------------------------------------------------------- 12


@pytest.mark.criterion(12, "Smoothing raises IntGrad's rank agreement with final-tap Grad-CAM")
def test_correlation_trend(gridpg_plain, detail):
    def series(method, tap):
        return series_from_records(gridpg_plain, method, tap, "gridpg")

    cam = series("gradcam", "final")
    plain = spearman(series("intgrad", "input"), cam)
    smooth = spearman(series("s-intgrad:17", "input"), cam)
    assert not isinstance(plain, Degenerate) and not isinstance(smooth, Degenerate)
    detail(f"{len(cam.items)} samples, rho {plain:.3f} -> {smooth:.3f}")
    assert len(cam.items) == 4 * GRIDPG_COUNT
    assert smooth - plain > 0


# ---------------------------------------------------------------- 13


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def _pipeline(model_path, root, workers, monkeypatch):
    # relative paths, so the echoed configs do not differ by directory
    root.mkdir()
    monkeypatch.chdir(root)
    common = ["--workers", str(workers), "--log-level", "WARNING"]
    assert main(["evaluate", "--model", str(model_path), "--out", "run", "--pool-size", "200",
                 "--count", "3", "--methods", "ixg,smoothgrad,gradcam", "--lrp", "focus",
                 "--taps", "input,final", "--settings", "gridpg,difull", "--save-maps",
                 *common]) == 0
    assert main(["aggatt", "--run", "run", "--out", "aggatt", *common]) == 0
    assert main(["correlate", "--run", "run", "--out", "correlate", *common]) == 0
    return _tree(root)


@pytest.mark.criterion(13, "evaluate -> aggatt -> correlate is byte-identical across runs and workers")
def test_pipeline_determinism(plain_model, trained, tmp_path, monkeypatch, detail):
    path = trained.path("tinyvgg-plain").resolve()
    first = _pipeline(path, tmp_path / "a", 1, monkeypatch)
    second = _pipeline(path, tmp_path / "b", 1, monkeypatch)
    parallel = _pipeline(path, tmp_path / "c", 8, monkeypatch)
    detail(f"{len(first)} files compared")
    assert len(first) > 10
    assert sorted(first) == sorted(parallel)
    assert [k for k in first if first[k] != second[k]] == []
    assert [k for k in first if first[k] != parallel[k]] == []
