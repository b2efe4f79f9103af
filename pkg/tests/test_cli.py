"""End-to-end tests of the command-line pipeline and its artifacts."""

import hashlib
import json
import logging

import numpy as np
import pytest

from tipguard.autoencoder import load_checkpoint
from tipguard.cli import main
from tipguard.synth import GroundTruth, write_corpus
from tipguard.timeseries import (
    MultivariateSeries,
    apply_normalizer,
    invert_normalizer,
)


def _sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def smoke_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert main(["synth", "--preset", "smoke", "--out", str(out),
                 "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def smoke_run(smoke_data, tmp_path_factory):
    """A one-epoch training run on the smoke corpus, shared across tests."""
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(smoke_data), "--out", str(out),
                 "--seed", "0", "--budget", "1"]) == 0
    assert main(["detect", "--checkpoint", str(out / "checkpoint.json"),
                 "--data", str(smoke_data), "--out", str(out),
                 "--metric", "mse", "--thresholds", "table4"]) == 0
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_smoke_writes_corpus(smoke_data, capsys):
    assert sorted(p.name for p in smoke_data.glob("*.csv")) == [
        "smoke-00.csv", "smoke-01.csv", "smoke-02.csv"]
    assert (smoke_data / "groundtruth.json").is_file()
    assert (smoke_data / "manifest.json").is_file()
    manifest = json.loads((smoke_data / "manifest.json").read_text())
    assert manifest["n_trials"] == 3
    assert manifest["run_config"]["parameters"]["preset"] == "smoke"


def test_synth_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--preset", "smoke", "--out", str(out),
                     "--seed", "7"]) == 0
    for path_a in sorted(a.glob("*")):
        assert _sha256(path_a) == _sha256(b / path_a.name), path_a.name


def test_synth_full_preset_has_ten_trials(tmp_path):
    assert main(["synth", "--preset", "full", "--out", str(tmp_path / "c"),
                 "--seed", "0"]) == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["n_trials"] == 10


def test_synth_prints_manifest(tmp_path, capsys):
    main(["synth", "--preset", "smoke", "--out", str(tmp_path / "m")])
    out = capsys.readouterr().out
    assert "3 trials" in out
    assert "smoke-00.csv" in out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_smoke_run_artifacts(smoke_run):
    checkpoint = json.loads((smoke_run / "checkpoint.json").read_text())
    assert checkpoint["run_config"]["schema"] == "tipguard-run/1"
    assert checkpoint["spec"]["encoder_layer_sizes"] == [19]
    report = json.loads((smoke_run / "train_report.json").read_text())
    assert report["report"]["epochs"] == 1
    assert report["n_windows"] == 28
    # The forced split keeps risky trials out of training.
    assert report["train_trials"] == ["smoke-00"]


def test_train_missing_data_dir_exits_3(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path)]) == 3
    assert "does not exist" in capsys.readouterr().err


def test_train_spec_overrides_profile(smoke_data, tmp_path):
    out = tmp_path / "custom"
    assert main(["train", "--data", str(smoke_data), "--out", str(out),
                 "--budget", "1",
                 "--spec", '{"hidden_sizes": [8], "step": 5}']) == 0
    model = load_checkpoint(out / "checkpoint.json")
    assert model.spec.encoder_layer_sizes == (8,)


def test_train_rejects_unknown_profile_key(smoke_data, tmp_path, capsys):
    assert main(["train", "--data", str(smoke_data),
                 "--out", str(tmp_path / "x"),
                 "--spec", '{"learning_rate": 0.1}']) == 3
    assert "unknown training profile key" in capsys.readouterr().err


def test_train_spec_file_argument(smoke_data, tmp_path):
    spec_path = tmp_path / "profile.json"
    spec_path.write_text('{"hidden_sizes": [6]}')
    out = tmp_path / "filespec"
    assert main(["train", "--data", str(smoke_data), "--out", str(out),
                 "--budget", "1", "--spec", str(spec_path)]) == 0
    model = load_checkpoint(out / "checkpoint.json")
    assert model.spec.encoder_layer_sizes == (6,)


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------


def test_tune_desk_scale(smoke_data, tmp_path, capsys):
    out = tmp_path / "tune"
    spec = json.dumps({
        "space": {"dimensions": [
            {"name": "units", "kind": "integer", "bounds": [4, 8]}]},
        "profile": {"hidden_sizes": [4]},
    })
    assert main(["tune", "--data", str(smoke_data), "--out", str(out),
                 "--seed", "1", "--spec", spec, "--budget", "2",
                 "--min-budget", "1", "--eta", "2", "--brackets", "1"]) == 0
    incumbent = json.loads((out / "incumbent.json").read_text())
    assert 4 <= incumbent["incumbent"]["units"] <= 8
    assert np.isfinite(incumbent["loss"])
    audit_rows = (out / "audit.jsonl").read_text().splitlines()
    assert len(audit_rows) == incumbent["n_evaluations"]
    assert "incumbent" in capsys.readouterr().out


def test_tune_over_batch_size_and_dropout(smoke_data, tmp_path):
    # knobs other than the architecture width are searchable too
    out = tmp_path / "tune-knobs"
    spec = json.dumps({
        "space": {"dimensions": [
            {"name": "batch_size", "kind": "integer", "bounds": [4, 16]},
            {"name": "dropout", "kind": "categorical",
             "bounds": [0.0, 0.2]}]},
        "profile": {"hidden_sizes": [4]},
    })
    assert main(["tune", "--data", str(smoke_data), "--out", str(out),
                 "--seed", "2", "--spec", spec, "--budget", "2",
                 "--min-budget", "1", "--eta", "2", "--brackets", "1"]) == 0
    incumbent = json.loads((out / "incumbent.json").read_text())
    assert 4 <= incumbent["incumbent"]["batch_size"] <= 16
    assert incumbent["incumbent"]["dropout"] in (0.0, 0.2)
    assert np.isfinite(incumbent["loss"])


def test_tune_rejects_unknown_dimension(smoke_data, tmp_path, capsys):
    spec = json.dumps({"space": {"dimensions": [
        {"name": "hidden", "kind": "integer", "bounds": [4, 8]}]}})
    assert main(["tune", "--data", str(smoke_data),
                 "--out", str(tmp_path / "x"), "--spec", spec]) == 3
    err = capsys.readouterr().err
    assert "hidden" in err and "tunable" in err


def test_tune_pure_random_skips_kde(smoke_data, tmp_path):
    out = tmp_path / "tune-rho1"
    assert main(["tune", "--data", str(smoke_data), "--out", str(out),
                 "--seed", "1", "--budget", "2", "--min-budget", "1",
                 "--eta", "2", "--brackets", "2", "--rho", "1.0",
                 "--spec", json.dumps({
                     "space": {"dimensions": [
                         {"name": "units", "kind": "integer",
                          "bounds": [4, 8]}]}})]) == 0
    incumbent = json.loads((out / "incumbent.json").read_text())
    assert incumbent["kde_consultations"] == 0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def test_detect_artifacts_and_scoring(smoke_run):
    thresholds = json.loads((smoke_run / "thresholds.json").read_text())
    assert thresholds["values"] == [0.04, 0.04, 0.04, 0.02, 0.05, 0.04]
    assert thresholds["source"] == "table4"
    summary = json.loads((smoke_run / "summary.json").read_text())
    assert set(summary["trials"]) == {"smoke-00", "smoke-01", "smoke-02"}
    assert "recall" in summary and "precision" in summary
    for line in (smoke_run / "events.jsonl").read_text().splitlines():
        row = json.loads(line)
        assert set(row) == {"trial_id", "start_ts", "end_ts", "metric",
                            "channels", "peak_errors"}


def test_detect_plot_csv_columns(smoke_run):
    lines = (smoke_run / "plot_smoke-00.csv").read_text().splitlines()
    assert lines[0] == "window_start,channel,metric,error,threshold,flagged"
    first = lines[1].split(",")
    assert first[1] == "accel_x" and first[2] == "mse"
    assert first[5] in ("0", "1")
    # 28 windows x 6 channels of data rows
    assert len(lines) == 1 + 28 * 6


def test_detect_is_deterministic(smoke_run, smoke_data, tmp_path):
    other = tmp_path / "again"
    assert main(["detect", "--checkpoint", str(smoke_run / "checkpoint.json"),
                 "--data", str(smoke_data), "--out", str(other),
                 "--metric", "mse", "--thresholds", "table4"]) == 0
    assert _sha256(other / "events.jsonl") == _sha256(
        smoke_run / "events.jsonl")


def test_detect_zero_events_on_model_generated_data(smoke_run, tmp_path):
    """Data stitched from the model's own forecasts never crosses a
    threshold."""
    model = load_checkpoint(smoke_run / "checkpoint.json")
    spec = model.spec
    step = 10
    rng = np.random.default_rng(5)
    n_samples = spec.input_len + spec.output_len + 9 * step
    t = np.arange(n_samples) / 100.0
    values = rng.normal(scale=0.3, size=(n_samples, 6))
    from tipguard.autoencoder import forecast
    for start in range(0, n_samples - spec.input_len - spec.output_len + 1,
                       step):
        window = values[start:start + spec.input_len].copy()
        values[start + spec.input_len:
               start + spec.input_len + spec.output_len] = (
            forecast(model, window))
    normalized = MultivariateSeries(t, values, 100.0, "normal", "selfmade")
    raw = invert_normalizer(normalized, model.normalizer)
    data_dir = tmp_path / "selfdata"
    write_corpus([(raw, GroundTruth(intervals=()))], data_dir)
    out = tmp_path / "selfrun"
    assert main(["detect", "--checkpoint", str(smoke_run / "checkpoint.json"),
                 "--data", str(data_dir), "--out", str(out),
                 "--metric", "mse", "--thresholds", "table4"]) == 0
    assert (out / "events.jsonl").read_text() == ""
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_events"] == 0


def test_detect_fit_thresholds_need_enough_windows(smoke_run, smoke_data,
                                                   tmp_path, capsys):
    # The smoke corpus has only 28 normal windows, far below the floor.
    assert main(["detect", "--checkpoint", str(smoke_run / "checkpoint.json"),
                 "--data", str(smoke_data), "--out", str(tmp_path / "x"),
                 "--thresholds", "fit"]) == 3
    assert ">= 100 windows" in capsys.readouterr().err


def test_detect_fit_thresholds_on_larger_corpus(tmp_path):
    data = tmp_path / "bench"
    assert main(["synth", "--preset", "bench", "--out", str(data),
                 "--seed", "3"]) == 0
    run = tmp_path / "benchrun"
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--seed", "0", "--budget", "1",
                 "--spec", '{"hidden_sizes": [6]}']) == 0
    assert main(["detect", "--checkpoint", str(run / "checkpoint.json"),
                 "--data", str(data), "--out", str(run),
                 "--metric", "mae", "--thresholds", "fit",
                 "--quantile", "0.99"]) == 0
    thresholds = json.loads((run / "thresholds.json").read_text())
    assert thresholds["source"] == "fit"
    assert thresholds["metric"] == "mae"
    assert all(v > 0 for v in thresholds["values"])
    assert thresholds["fit_quantiles"] is not None
    assert (run / "events.jsonl").is_file()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_report_sections_and_determinism(smoke_run, tmp_path):
    assert main(["report", "--run", str(smoke_run)]) == 0
    report = json.loads((smoke_run / "report.json").read_text())
    assert set(report) == {"forecast_quality", "loss_distribution",
                           "event_timelines", "provenance"}
    markdown = (smoke_run / "report.md").read_text()
    for heading in ("## Forecast quality", "## Loss distribution",
                    "## Event timelines", "## Provenance"):
        assert heading in markdown
    first = _sha256(smoke_run / "report.json")
    assert main(["report", "--run", str(smoke_run),
                 "--out", str(tmp_path / "r2")]) == 0
    assert _sha256(tmp_path / "r2" / "report.json") == first


def test_report_missing_artifacts_enumerated(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--run", str(tmp_path / "empty")]) == 3
    err = capsys.readouterr().err
    for name in ("train_report.json", "thresholds.json", "events.jsonl",
                 "summary.json"):
        assert name in err


# ---------------------------------------------------------------------------
# entry-point plumbing
# ---------------------------------------------------------------------------


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["bogus-command"])
    assert excinfo.value.code == 2
    with pytest.raises(SystemExit) as excinfo:
        main(["detect", "--checkpoint", "x", "--data", "y", "--out", "z",
              "--metric", "rmse"])
    assert excinfo.value.code == 2
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--data", "x", "--out", "y", "--budget", "0"])
    assert excinfo.value.code == 2


def test_log_level_from_environment(smoke_data, tmp_path, monkeypatch):
    monkeypatch.setenv("TIPGUARD_LOG", "DEBUG")
    main(["synth", "--preset", "smoke", "--out", str(tmp_path / "log")])
    assert logging.getLogger().level == logging.DEBUG
    monkeypatch.setenv("TIPGUARD_LOG", "WARNING")
    main(["synth", "--preset", "smoke", "--out", str(tmp_path / "log2")])
    assert logging.getLogger().level == logging.WARNING


def test_every_artifact_embeds_run_config(smoke_run, smoke_data):
    artifacts = ["checkpoint.json", "train_report.json", "thresholds.json",
                 "summary.json"]
    for name in artifacts:
        doc = json.loads((smoke_run / name).read_text())
        assert doc["run_config"]["schema"] == "tipguard-run/1", name
        assert "seed" in doc["run_config"], name
    manifest = json.loads((smoke_data / "manifest.json").read_text())
    assert manifest["run_config"]["schema"] == "tipguard-run/1"
