import hashlib
import json
import subprocess
import sys

import pytest
import yaml

from attreval.cli import main
from attreval.grids import read_records_csv
from attreval.nn import build_preset, load_model
from attreval.nn.serialization import model_hash


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m.atev"
    # enough training that several classes survive the confidence filter
    assert main(["train", "--out", str(path), "--train-count", "300", "--test-count", "50",
                 "--epochs", "5", "--seed", "2"]) == 0
    return path


def _evaluate(model, out, *extra):
    return main(["evaluate", "--model", str(model), "--out", str(out), "--pool-size", "30",
                 "--confidence", "0", "--count", "2", "--methods", "ixg,gradcam",
                 "--taps", "input,final", *extra])


def test_train_zero_epochs_returns_init(tmp_path):
    assert main(["train", "--out", str(tmp_path / "new" / "dir"), "--train-count", "10",
                 "--test-count", "10", "--epochs", "0", "--seed", "5"]) == 0
    path = tmp_path / "new" / "dir" / "tinyvgg-plain.atev"
    model = load_model(path)
    init = build_preset("tinyvgg-plain", seed=5)
    assert model_hash(model) == model_hash(init)
    metrics = json.loads(path.with_suffix(".json").read_text())
    assert metrics["epochs"] == 0 and "sha256" in metrics
    cfg = yaml.safe_load((path.parent / "config.yaml").read_text())
    assert cfg["seed"] == 5 and "out" not in cfg and "workers" not in cfg


# pinned from a first run; a change means training is no longer reproducible
PINNED_TRAIN_SHA256 = "b632716a7827357be72596363ba904ac5bb0b5f5d849389e76db6bfc55d83c8e"


def test_train_hash_is_pinned(tmp_path):
    assert main(["train", "--arch", "tinyvgg-plain", "--data", "synthetic", "--seed", "7",
                 "--train-count", "200", "--test-count", "50", "--epochs", "1",
                 "--out", str(tmp_path)]) == 0
    assert hashlib.sha256((tmp_path / "tinyvgg-plain.atev").read_bytes()).hexdigest() == \
        PINNED_TRAIN_SHA256


def test_train_min_accuracy_fails(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--train-count", "10", "--test-count", "10",
                 "--epochs", "0", "--min-accuracy", "1.01"]) == 2


def test_evaluate_outputs_and_cache(tiny_model, tmp_path, capsys):
    out = tmp_path / "run"
    assert _evaluate(tiny_model, out) == 0
    for name in ("records.csv", "records.jsonl", "summary.csv", "summary.json",
                 "config.yaml", "cache.jsonl"):
        assert (out / name).exists(), name
    recs = read_records_csv(out / "records.csv")
    assert len(recs) == 2 * 4 * 2 * 2
    first = {n: (out / n).read_bytes() for n in ("records.csv", "summary.csv")}
    capsys.readouterr()
    assert _evaluate(tiny_model, out) == 0
    assert "32 from cache" in capsys.readouterr().out
    assert all((out / n).read_bytes() == b for n, b in first.items())


def test_cache_key_tracks_config(tiny_model, tmp_path, capsys):
    out = tmp_path / "run"
    assert _evaluate(tiny_model, out) == 0
    capsys.readouterr()
    assert _evaluate(tiny_model, out, "--seed", "9") == 0
    assert "(0 from cache)" in capsys.readouterr().out


def test_aggatt_and_correlate(tiny_model, tmp_path):
    run = tmp_path / "run"
    assert _evaluate(tiny_model, run, "--save-maps") == 0
    assert list((run / "maps" / "gridpg" / "ixg" / "input").glob("*.atmp"))
    assert main(["aggatt", "--run", str(run), "--out", str(tmp_path / "agg")]) == 0
    idx = json.loads((tmp_path / "agg" / "gridpg" / "ixg" / "input" / "index.json").read_text())
    assert sum(len(b["members"]) for b in idx["bins"]) == 8
    assert main(["correlate", "--run", str(run), "--out", str(tmp_path / "cor"),
                 "--series", "ixg@input,gradcam@final"]) == 0
    lines = (tmp_path / "cor" / "correlation.csv").read_text().splitlines()
    assert len(lines) == 3


def test_aggatt_without_maps_is_runtime_error(tiny_model, tmp_path):
    assert _evaluate(tiny_model, tmp_path / "run") == 0
    assert main(["aggatt", "--run", str(tmp_path / "run"), "--out", str(tmp_path / "a")]) == 2


def test_aggatt_on_empty_records(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / "records.csv").write_text("sample_id,method,tap,setting,target_cell,score,numerator\n")
    assert main(["aggatt", "--run", str(run), "--out", str(tmp_path / "a")]) == 0


def test_correlate_unknown_series(tiny_model, tmp_path):
    assert _evaluate(tiny_model, tmp_path / "run") == 0
    assert main(["correlate", "--run", str(tmp_path / "run"), "--out", str(tmp_path / "c"),
                 "--series", "rise@input"]) == 2


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--epochs", "x"],
                                  ["evaluate", "--out", "x"],
                                  ["evaluate", "--model", "/nonexistent.atev"]])
def test_usage_errors(argv, tmp_path):
    assert main(argv) == 1


def test_bad_method_is_usage_error(tiny_model, tmp_path):
    assert main(["evaluate", "--model", str(tiny_model), "--out", str(tmp_path),
                 "--methods", "nope"]) == 1


def test_corrupt_model_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.atev"
    bad.write_bytes(b"not a model")
    assert main(["evaluate", "--model", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_config_precedence(tiny_model, tmp_path, monkeypatch):
    conf = tmp_path / "c.yaml"
    conf.write_text(yaml.safe_dump({"count": 1, "seed": 4, "methods": ["ixg"],
                                    "method_config": {"intgrad_steps": 8}}))
    monkeypatch.setenv("ATTREVAL_SEED", "77")
    out = tmp_path / "run"
    assert main(["evaluate", "--config", str(conf), "--model", str(tiny_model), "--out",
                 str(out), "--pool-size", "30", "--confidence", "0", "--seed", "3",
                 "--intgrad-steps", "16"]) == 0
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert echoed["seed"] == 3 and echoed["count"] == 1
    assert echoed["method_config"] == {"intgrad_steps": 16}
    assert "cache" not in echoed and "workers" not in echoed


def test_seed_from_environment(tiny_model, tmp_path, monkeypatch):
    monkeypatch.setenv("ATTREVAL_SEED", "77")
    assert _evaluate(tiny_model, tmp_path / "r") == 0
    assert yaml.safe_load((tmp_path / "r" / "config.yaml").read_text())["seed"] == 77
    monkeypatch.setenv("ATTREVAL_SEED", "abc")
    assert _evaluate(tiny_model, tmp_path / "s") == 1


def test_unknown_config_key(tmp_path):
    conf = tmp_path / "c.yaml"
    conf.write_text("colour: blue\n")
    assert main(["aggatt", "--config", str(conf), "--run", str(tmp_path)]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "attreval", "--help"], capture_output=True,
                         text=True, check=False)
    assert res.returncode == 0 and "gamma-sweep" in res.stdout
