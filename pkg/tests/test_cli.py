import json
import warnings

import numpy as np
import pytest

from msgaf.cli import RunConfig, load_config, main
from msgaf.dataset import load_dataset
from msgaf.encoding import METRIC_COLUMNS
from msgaf.simkit import read_records
from msgaf.training import load_checkpoint

SMALL_FLAGS = ["--hidden", "8", "--out-dim", "8", "--scene-hidden", "8", "--scene-dim", "4",
               "--expert-hidden", "8"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("generate", "--windows", 240, "--seed", 1, "--output-dir", out) == 0
    assert run("train", "--output-dir", out, "--epochs", 40, "--seed", 1, *SMALL_FLAGS) == 0
    return out


def _lines(path):
    return path.read_text().splitlines()


def test_generate_counts_and_creates_directories(tmp_path, capsys):
    out = tmp_path / "a" / "b"
    assert run("generate", "--template", "boutique11", "--windows", 100, "--seed", 1, "--output-dir", out) == 0
    assert len(_lines(out / "dataset.jsonl")) == 100
    assert (out / "dataset.topology.json").exists()
    assert "scenario mix" in capsys.readouterr().out


def test_generate_is_deterministic(tmp_path):
    for name in ("x", "y"):
        assert run("generate", "--windows", 30, "--seed", 3, "--output-dir", tmp_path / name) == 0
    assert (tmp_path / "x" / "dataset.jsonl").read_bytes() == (tmp_path / "y" / "dataset.jsonl").read_bytes()


def test_tiny_train_is_loadable(tmp_path):
    assert run("generate", "--windows", 20, "--output-dir", tmp_path) == 0
    assert run("train", "--output-dir", tmp_path, "--epochs", 3, *SMALL_FLAGS) == 0
    ckpt = load_checkpoint(tmp_path / "model.ckpt")
    assert ckpt.config.hidden == 8 and ckpt.meta["percentile"] == 90
    log = [json.loads(x) for x in _lines(tmp_path / "train_log.jsonl")]
    assert len(log) == 3 and set(log[0]) == {"epoch", "train_loss", "val_loss", "lr"}


def test_evaluate_matches_train_report(trained):
    assert run("evaluate", "--output-dir", trained, *SMALL_FLAGS) == 0
    report = json.loads((trained / "train_report.json").read_text())
    metrics = json.loads((trained / "metrics.json").read_text())
    assert metrics == report["test"]
    samples = [json.loads(x) for x in _lines(trained / "samples.jsonl")]
    assert len(samples) == metrics["n_samples"] == 36
    for s in samples:
        assert abs(sum(s["beta"]) - 1.0) <= 1e-8
        assert abs(sum(s["omega"]) - 1.0) <= 1e-8


def test_predict_matches_evaluate_bitwise(trained, capsys):
    assert run("evaluate", "--output-dir", trained, *SMALL_FLAGS) == 0
    samples = [json.loads(x) for x in _lines(trained / "samples.jsonl")]
    records = {r["window_id"]: r for r in read_records(trained / "dataset.jsonl")}
    capsys.readouterr()
    for s in samples[:5]:
        rec_path = trained / "probe.json"
        rec_path.write_text(json.dumps(records[s["window_id"]]))
        assert run("predict", "--output-dir", trained, "--record", rec_path, *SMALL_FLAGS) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["L_hat_ms"] == s["L_hat"]
        assert out["beta"] == s["beta"] and out["omega"] == s["omega"]


def test_predict_rejects_bad_records(trained, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("predict", "--output-dir", trained, "--record", bad, *SMALL_FLAGS) != 0
    rec = read_records(trained / "dataset.jsonl")[0]
    del rec["C"]
    bad.write_text(json.dumps(rec))
    assert run("predict", "--output-dir", trained, "--record", bad, *SMALL_FLAGS) == 1


def test_evaluate_rejects_mismatched_config(trained, capsys):
    assert run("evaluate", "--output-dir", trained, "--hidden", 9) == 1
    assert "hash" in capsys.readouterr().err


def test_doubled_bottleneck_quota_lowers_predictions(tmp_path):
    """Soft transfer check of quota monotonicity; warns instead of failing."""
    assert run("generate", "--windows", 600, "--output-dir", tmp_path) == 0
    assert run("train", "--output-dir", tmp_path, "--epochs", 60) == 0
    model = load_checkpoint(tmp_path / "model.ckpt").model()
    data = load_dataset(tmp_path / "dataset.jsonl")
    records = {r["window_id"]: r for r in read_records(tmp_path / "dataset.jsonl")}
    test = data.split()[2]
    cpu, quota = METRIC_COLUMNS.index("cpu_util"), len(METRIC_COLUMNS)
    lower = total = 0
    for i in range(len(test)):
        if records[int(test.window_ids[i])]["meta"]["saturated"]:
            continue
        X = test.X[i]
        bumped = X.copy()
        bumped[int(np.argmax(X[:, cpu])), quota] *= 2.0
        before = model.predict(X, data.A).L_hat.value[0]
        after = model.predict(bumped, data.A).L_hat.value[0]
        lower += after < before
        total += 1
    assert total > 0
    frac = lower / total
    print(f"doubled bottleneck quota lowered the prediction on {frac:.0%} of {total} probes")
    if frac < 0.8:
        warnings.warn(f"quota monotonicity transfer below 80%: {frac:.0%}", stacklevel=1)


def test_percentile_and_variant_flags(tmp_path):
    assert run("generate", "--windows", 40, "--output-dir", tmp_path) == 0
    assert run("train", "--output-dir", tmp_path, "--epochs", 2, "--percentile", 99,
               "--variant", "no_scene", *SMALL_FLAGS) == 0
    ckpt = load_checkpoint(tmp_path / "model.ckpt")
    assert ckpt.meta["percentile"] == 99
    assert ckpt.config.variant == "no_scene"
    assert "gate.W" not in ckpt.params and ckpt.params["experts.W1"].shape[0] == 1


def test_unknown_config_key_is_a_usage_error(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"windows": 10, "learning_rate": 0.1}))
    assert run("generate", "--config", cfg, "--output-dir", tmp_path) == 1
    assert run("generate", "--bogus-flag") == 1
    assert run("train", "--percentile", 75, "--output-dir", tmp_path) == 1


def test_missing_dataset_is_reported(tmp_path, capsys):
    assert run("train", "--output-dir", tmp_path / "nothing") != 0
    assert "nothing" in capsys.readouterr().err


def test_effective_config_round_trips(tmp_path):
    assert run("generate", "--windows", 40, "--seed", 5, "--output-dir", tmp_path / "a") == 0
    assert run("train", "--output-dir", tmp_path / "a", "--epochs", 2, "--seed", 5, *SMALL_FLAGS) == 0
    echoed = tmp_path / "a" / "config.json"
    cfg = load_config(str(echoed), {})
    assert cfg == RunConfig(**json.loads(echoed.read_text()))
    assert cfg.epochs == 2 and cfg.hidden == 8
    assert run("train", "--config", echoed, "--checkpoint", tmp_path / "again.ckpt") == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "a" / "model.ckpt").read_bytes()


def test_sweep_and_ablate_commands(tmp_path, capsys):
    assert run("generate", "--windows", 60, "--output-dir", tmp_path) == 0
    common = ["--output-dir", tmp_path, "--epochs", 1, "--batch-size", 8, *SMALL_FLAGS]
    assert run("sweep", *common) == 0
    assert len({r["variant"] for r in json.loads((tmp_path / "sweep.json").read_text())}) == 4
    assert run("ablate", *common) == 0
    assert len(json.loads((tmp_path / "ablation.json").read_text())) == 12
    assert "levels=3" in capsys.readouterr().out


def test_divergent_training_exits_with_runtime_code(tmp_path, capsys):
    assert run("generate", "--windows", 60, "--output-dir", tmp_path) == 0
    assert run("train", "--output-dir", tmp_path, "--epochs", 20, "--lr", 1e200, *SMALL_FLAGS) == 2
    assert "non-finite" in capsys.readouterr().err
    assert (tmp_path / "train_log.jsonl").exists()
    assert not (tmp_path / "model.ckpt").exists()
