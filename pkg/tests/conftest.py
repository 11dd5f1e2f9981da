import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

from attreval.data import filter_confident, gen_synthetic
from attreval.nn import (AvgPool2d, BatchNorm2d, CellMerge, CellSplit, Conv2d, Flatten,
                         GlobalAvgPool, Linear, MaxPool2d, PointwiseLinear, RegionPool, ReLU,
                         build_preset, load_model, save_model)
from attreval.recipes import POOL_START, RECIPES, train_preset

TRAIN_COUNT, TEST_COUNT = 5000, 1000


def _model_dir(config):
    env = os.environ.get("ATTREVAL_MODEL_DIR")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return Path(config.cache.mkdir("attreval-models"))


def _fingerprint(arch):
    spec = {"arch": arch, "recipe": RECIPES[arch], "train": TRAIN_COUNT, "test": TEST_COUNT}
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:12]


class TrainedModels:
    """Trains each preset once and keeps it in the pytest cache directory."""

    def __init__(self, root):
        self.root = root
        self._loaded = {}

    def path(self, arch):
        return self.root / f"{arch}-{_fingerprint(arch)}.atev"

    def get(self, arch):
        if arch in self._loaded:
            return self._loaded[arch]
        path = self.path(arch)
        meta_path = path.with_suffix(".json")
        if path.exists() and meta_path.exists():
            model = load_model(path)
            metrics = json.loads(meta_path.read_text())
        else:
            model, metrics = train_preset(arch, seed=0, train_count=TRAIN_COUNT,
                                          test_count=TEST_COUNT)
            save_model(model, path)
            meta_path.write_text(json.dumps(metrics, sort_keys=True))
        self._loaded[arch] = (model, metrics)
        return model, metrics


@pytest.fixture(scope="session")
def trained(request):
    return TrainedModels(_model_dir(request.config))


@pytest.fixture(scope="session")
def plain_model(trained):
    return trained.get("tinyvgg-plain")[0]


@pytest.fixture(scope="session")
def bn_model(trained):
    return trained.get("tinyvgg-bn")[0]


@pytest.fixture(scope="session")
def nobias_model(trained):
    return trained.get("tinyvgg-plain-nobias")[0]


def confident_pool(model, count=1000):
    return filter_confident(model, gen_synthetic(count, start=POOL_START), 0.99)


@pytest.fixture(scope="session")
def plain_pool(plain_model):
    return confident_pool(plain_model)


@pytest.fixture(scope="session")
def bn_pool(bn_model):
    return confident_pool(bn_model)


@pytest.fixture(scope="session")
def random_model():
    """Untrained tinyvgg; good enough for structural properties."""
    return build_preset("tinyvgg-plain", seed=3)


@pytest.fixture(scope="session")
def small_pool():
    return gen_synthetic(40, seed=5, start=POOL_START)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- layer cases


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _distinct(rng, shape):
    # well separated values keep max pooling off its kinks
    return rng.permutation(np.prod(shape)).reshape(shape).astype(np.float64) * 0.01


def layer_cases():
    rng = np.random.default_rng(0)
    return [
        ("conv", Conv2d(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), 1, 1),
         rng.standard_normal((2, 3, 6, 6))),
        ("conv-stride", Conv2d(rng.standard_normal((2, 3, 3, 3)), None, 2, 0),
         rng.standard_normal((2, 3, 7, 7))),
        ("pointwise", PointwiseLinear(rng.standard_normal((5, 3, 1, 1)), rng.standard_normal(5)),
         rng.standard_normal((2, 3, 4, 4))),
        ("linear", Linear(rng.standard_normal((4, 6)), rng.standard_normal(4)),
         rng.standard_normal((3, 6))),
        ("bn", BatchNorm2d(rng.uniform(0.5, 2, 3), rng.standard_normal(3),
                           rng.standard_normal(3), rng.uniform(0.5, 2, 3)),
         rng.standard_normal((2, 3, 4, 4))),
        ("relu", ReLU(), _away_from_zero(rng, (2, 3, 4, 4))),
        ("maxpool", MaxPool2d(2), _distinct(rng, (2, 3, 6, 6))),
        ("maxpool-overlap", MaxPool2d(3, 2), _distinct(rng, (1, 2, 7, 7))),
        ("avgpool", AvgPool2d(2), rng.standard_normal((2, 3, 6, 6))),
        ("gap", GlobalAvgPool(), rng.standard_normal((2, 3, 4, 4))),
        ("flatten", Flatten(), rng.standard_normal((2, 3, 2, 2))),
        ("cellsplit", CellSplit(2), rng.standard_normal((2, 3, 4, 6))),
        ("cellmerge", CellMerge(2), rng.standard_normal((8, 5))),
        ("regionpool", RegionPool(np.array([[0, 0, 1], [0, 1, 1], [2, 2, 2]])),
         rng.standard_normal((2, 3, 3, 3))),
    ]


# ---------------------------------------------------------------- acceptance report

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


_TRAINED_FIXTURES = {"trained", "plain_model", "bn_model", "nobias_model", "plain_pool", "bn_pool"}


def pytest_collection_modifyitems(items):
    for item in items:
        if _TRAINED_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


@pytest.fixture
def detail(request):
    """Lets an acceptance test attach measured values to its report line."""
    notes = []
    request.node.criterion_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    ok = rep.passed and _CRITERIA.get(number, (True,))[0]
    notes = "; ".join(getattr(item, "criterion_notes", []))
    _CRITERIA[number] = (ok, title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, notes = _CRITERIA[number]
        line = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}"
        tr.write_line(line + (f"  ({notes})" if notes else ""))
    passed = sum(v[0] for v in _CRITERIA.values())
    tr.write_line(f"{passed}/{len(_CRITERIA)} criteria passed")
