"""Command-line pipeline: synth, train, tune, detect, report.

Each subcommand reads plain files (CSV trials, JSON configs) and writes JSON
artifacts that embed the full run configuration, so any output can be traced
back to its inputs and seeds. Set TIPGUARD_LOG=DEBUG (or INFO) for verbose
logging. Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autoencoder import (
    AutoencoderSpec,
    build,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .bohb import (
    bohb_run,
    reference_schedule_params,
    space_from_json,
    write_audit,
)
from .detector import (
    CHANNELS,
    METRICS,
    SUMMARY_QUANTILES,
    compute_errors,
    detect,
    fit_distribution,
    preset_thresholds,
    score_events,
    select_thresholds,
)
from .errors import DataError, NumericError
from .synth import PRESETS, corpus, read_groundtruth, write_corpus
from .timeseries import (
    WindowSpec,
    apply_normalizer,
    concat_windows,
    fit_normalizer,
    ingest_csv,
    make_windows,
    split_trials,
)

log = logging.getLogger(__name__)

RUN_SCHEMA = "tipguard-run/1"

#: Training profile used when --spec is omitted: the best configuration from
#: the search protocol (250 ms in, 50 ms out, one 19-unit layer, stride 10).
DEFAULT_PROFILE = {
    "input_len": 25,
    "output_len": 5,
    "step": 10,
    "hidden_sizes": [19],
    "dropout": 0.2,
    "batch_size": 16,
    "train_frac": 0.7,
    "validation_frac": 0.1,
}

#: Search space used when `tune` gets no --spec: node count of a one-layer
#: network, 4..64 units.
DEFAULT_TUNE_SPEC = {
    "space": {"dimensions": [
        {"name": "units", "kind": "integer", "bounds": [4, 64]}]},
    "profile": {},
}

# search dimensions the tune objective knows how to apply; anything else in
# a custom space is rejected before the first evaluation
TUNABLE = ("batch_size", "depth", "dropout", "units")


def run_config(command, seed, **parameters):
    """The provenance document embedded in every artifact."""
    return {"schema": RUN_SCHEMA, "command": command, "seed": seed,
            "parameters": parameters}


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def _load_json_arg(value):
    """Accept inline JSON ('{...}') or a path to a JSON file."""
    text = value.strip()
    if not text.startswith("{"):
        path = Path(value)
        if not path.is_file():
            raise DataError(f"config file {value!r} does not exist")
        text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {value!r}: {exc}") from exc


def load_corpus(data_dir):
    """All trial CSVs of a directory, sorted by filename for determinism."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    paths = sorted(data_dir.glob("*.csv"))
    if not paths:
        raise DataError(f"no trial CSVs found in {data_dir}")
    return [ingest_csv(path) for path in paths]


def _profile_from(args):
    profile = dict(DEFAULT_PROFILE)
    if getattr(args, "spec", None):
        overrides = _load_json_arg(args.spec)
        unknown = set(overrides) - set(DEFAULT_PROFILE)
        if unknown:
            raise DataError(
                f"unknown training profile key(s) {sorted(unknown)}; "
                f"expected a subset of {sorted(DEFAULT_PROFILE)}")
        profile.update(overrides)
    return profile


def _training_dataset(series_list, profile, seed):
    train_split, held_out = split_trials(series_list, profile["train_frac"],
                                         seed=seed)
    normalizer = fit_normalizer(train_split)
    wspec = WindowSpec(profile["input_len"], profile["output_len"],
                       profile["step"])
    dataset = concat_windows([
        make_windows(apply_normalizer(s, normalizer), wspec)
        for s in train_split])
    return train_split, held_out, normalizer, wspec, dataset


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args):
    trials = corpus(args.preset, seed=args.seed)
    manifest = write_corpus(trials, args.out)
    manifest["run_config"] = run_config("synth", args.seed,
                                        preset=args.preset)
    _write_json(Path(args.out) / "manifest.json", manifest)
    print(f"wrote {manifest['n_trials']} trials "
          f"({manifest['total_samples']} samples) to {args.out}")
    for name in manifest["files"]:
        print(f"  {name}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args):
    profile = _profile_from(args)
    series_list = load_corpus(args.data)
    train_split, _, normalizer, _, dataset = _training_dataset(
        series_list, profile, args.seed)
    spec = AutoencoderSpec(profile["input_len"], profile["output_len"],
                           tuple(profile["hidden_sizes"]),
                           dropout_rate=profile["dropout"])
    model = build(spec, seed=args.seed)
    model.normalizer = normalizer
    report = train(model, dataset, budget=args.budget,
                   batch_size=profile["batch_size"],
                   validation_frac=profile["validation_frac"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = run_config("train", args.seed, data=str(args.data),
                        budget=args.budget, profile=profile)
    save_checkpoint(model, out / "checkpoint.json",
                    extra={"run_config": config})
    _write_json(out / "train_report.json", {
        "run_config": config,
        "report": report.to_dict(),
        "train_trials": [s.trial_id for s in train_split],
        "n_windows": dataset.n,
    })
    print(f"trained {report.epochs} epochs on {dataset.n} windows: "
          f"val_loss={report.final_val_loss:.6f} val_r2={report.val_r2:.4f} "
          f"({report.wall_time_s:.1f}s)")
    return 0


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------


def _config_seed(base_seed, config):
    """A stable per-configuration seed, independent of evaluation order."""
    parts = [base_seed]
    for name in sorted(config):
        value = config[name]
        parts.append(int(value) if isinstance(value, (int, np.integer))
                     else abs(hash(str(value))) % 2**31)
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def cmd_tune(args):
    doc = dict(DEFAULT_TUNE_SPEC)
    if args.spec:
        doc = _load_json_arg(args.spec)
        if "space" not in doc:
            raise DataError("tune spec needs a 'space' document")
    space = space_from_json(doc["space"])
    unknown = [d.name for d in space.dimensions if d.name not in TUNABLE]
    if unknown:
        raise DataError(f"unknown search dimension(s) {unknown}; "
                        f"tunable: {sorted(TUNABLE)}")
    profile = dict(DEFAULT_PROFILE)
    profile.update(doc.get("profile", {}))

    series_list = load_corpus(args.data)
    _, _, normalizer, _, dataset = _training_dataset(
        series_list, profile, args.seed)

    reference = reference_schedule_params()
    max_budget = args.budget if args.budget else reference["max_budget"]
    min_budget = args.min_budget if args.min_budget else max(
        1, round(max_budget * reference["min_budget"]
                 / reference["max_budget"]))
    eta = args.eta if args.eta else reference["eta"]

    def objective(config, budget):
        if "units" in config or "depth" in config:
            units = int(config.get("units", profile["hidden_sizes"][0]))
            sizes = (units,) * int(config.get("depth", 1))
        else:
            sizes = tuple(profile["hidden_sizes"])
        spec = AutoencoderSpec(
            profile["input_len"], profile["output_len"], sizes,
            dropout_rate=float(config.get("dropout", profile["dropout"])))
        model = build(spec, seed=_config_seed(args.seed, config))
        model.normalizer = normalizer
        report = train(model, dataset, budget=int(budget),
                       batch_size=int(config.get("batch_size",
                                                 profile["batch_size"])),
                       validation_frac=profile["validation_frac"])
        return report.final_val_loss

    result = bohb_run(space, objective, min_budget=min_budget,
                      max_budget=max_budget, eta=eta, rho=args.rho,
                      n_brackets=args.brackets, seed=args.seed,
                      workers=args.workers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = run_config(
        "tune", args.seed, data=str(args.data), space=doc["space"],
        profile=profile, min_budget=min_budget, max_budget=max_budget,
        eta=eta, rho=args.rho, brackets=args.brackets, workers=args.workers)
    write_audit(result.audit, out / "audit.jsonl")
    _write_json(out / "incumbent.json", {
        "run_config": config,
        "incumbent": result.incumbent,
        "loss": result.incumbent_loss,
        "n_evaluations": result.n_evaluations,
        "n_unique_configs": result.n_unique_configs,
        "n_unique_at_max": result.n_unique_at_max,
        "kde_consultations": result.kde_consultations,
    })
    print(f"incumbent {result.incumbent} loss={result.incumbent_loss:.6f} "
          f"({result.n_evaluations} evaluations, "
          f"{result.n_unique_configs} unique, "
          f"{result.n_unique_at_max} at full budget)")
    return 0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def _fit_thresholds(model, series_list, wspec, metric, quantile):
    normal = [s for s in series_list
              if s.annotation in ("normal", "unlabeled")]
    if not normal:
        raise DataError("threshold fitting needs normal trials in the data")
    windows = concat_windows([
        make_windows(apply_normalizer(s, model.normalizer), wspec)
        for s in normal])
    dist = fit_distribution(compute_errors(model, windows))
    thresholds = select_thresholds(dist, metric, quantile)
    quantile_table = {str(q): dist.quantiles[metric][q].tolist()
                      for q in SUMMARY_QUANTILES}
    return thresholds, quantile_table


def _write_plot_csv(path, errors, thresholds, exceed_matrix):
    metric = thresholds.metric
    matrix = errors.mse if metric == "mse" else errors.mae
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("window_start,channel,metric,error,threshold,flagged\n")
        for i, start in enumerate(errors.window_start_indices):
            for c, channel in enumerate(CHANNELS):
                fh.write(f"{int(start)},{channel},{metric},"
                         f"{matrix[i, c]:.12g},{thresholds.values[c]:.12g},"
                         f"{int(exceed_matrix[i, c])}\n")


def cmd_detect(args):
    model = load_checkpoint(args.checkpoint)
    if model.normalizer is None:
        raise DataError(
            f"checkpoint {args.checkpoint} carries no normalizer")
    series_list = load_corpus(args.data)
    wspec = WindowSpec(model.spec.input_len, model.spec.output_len, args.step)

    if args.thresholds == "table4":
        thresholds = preset_thresholds(args.metric)
        quantile_table = None
    else:
        thresholds, quantile_table = _fit_thresholds(
            model, series_list, wspec, args.metric, args.quantile)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = run_config(
        "detect", args.seed, data=str(args.data),
        checkpoint=str(args.checkpoint), metric=args.metric,
        thresholds=args.thresholds, quantile=args.quantile, step=args.step)
    _write_json(out / "thresholds.json", {
        "run_config": config,
        "metric": thresholds.metric,
        "source": args.thresholds,
        "values": list(thresholds.values),
        "channels": list(CHANNELS),
        "fit_quantiles": quantile_table,
    })

    truth_path = Path(args.data) / "groundtruth.json"
    truth = read_groundtruth(truth_path) if truth_path.is_file() else None

    per_trial = {}
    n_events = 0
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        for series in series_list:
            events = detect(model, series, thresholds, wspec)
            n_events += len(events)
            rate = series.nominal_rate
            t0 = float(series.t[0])
            for ev in events:
                fh.write(json.dumps({
                    "trial_id": series.trial_id,
                    "start_ts": round(t0 + ev.start / rate, 9),
                    "end_ts": round(t0 + ev.end / rate, 9),
                    "metric": ev.metric,
                    "channels": list(ev.channels),
                    "peak_errors": [round(p, 9) for p in ev.peak_errors],
                }, sort_keys=True) + "\n")

            normalized = apply_normalizer(series, model.normalizer)
            errors = compute_errors(model, make_windows(normalized, wspec))
            matrix = errors.mse if args.metric == "mse" else errors.mae
            exceed = matrix > np.asarray(thresholds.values)
            _write_plot_csv(out / f"plot_{series.trial_id}.csv",
                            errors, thresholds, exceed)

            entry = {"annotation": series.annotation, "n_events": len(events)}
            if truth is not None and series.trial_id in truth:
                scored = score_events(events, truth[series.trial_id],
                                      slack=wspec.output_len)
                entry["recall"] = scored["recall"]
                entry["n_false_positives"] = scored["n_false_positives"]
                entry["n_matched_intervals"] = scored["n_matched_intervals"]
            per_trial[series.trial_id] = entry

    summary = {"run_config": config, "n_events": n_events,
               "trials": per_trial}
    if truth is not None:
        n_fp = sum(e.get("n_false_positives", 0) for e in per_trial.values())
        summary["precision"] = (1.0 if n_events == 0
                                else (n_events - n_fp) / n_events)
        kinds = {}
        for trial_id, gt in truth.items():
            if trial_id not in per_trial:
                continue
            recall = per_trial[trial_id].get("recall", {})
            for kind, _, _ in gt.intervals:
                kinds.setdefault(kind, []).append(recall.get(kind, 0.0))
        summary["recall"] = {k: float(np.mean(v)) for k, v in kinds.items()}
    _write_json(out / "summary.json", summary)
    print(f"{n_events} events across {len(series_list)} trials "
          f"(metric={args.metric}, thresholds={args.thresholds})")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args):
    run_dir = Path(args.run)
    wanted = {
        "train_report.json": None,
        "thresholds.json": None,
        "events.jsonl": None,
        "summary.json": None,
    }
    missing = [name for name in wanted if not (run_dir / name).is_file()]
    if missing:
        raise DataError(
            f"run directory {run_dir} is missing artifact(s): "
            f"{', '.join(sorted(missing))}")

    train_report = json.loads((run_dir / "train_report.json").read_text())
    thresholds = json.loads((run_dir / "thresholds.json").read_text())
    summary = json.loads((run_dir / "summary.json").read_text())
    timelines = {}
    with open(run_dir / "events.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            timelines.setdefault(row["trial_id"], []).append(
                {"start_ts": row["start_ts"], "end_ts": row["end_ts"],
                 "channels": row["channels"]})

    report = {
        "forecast_quality": {
            "val_r2": train_report["report"]["val_r2"],
            "final_train_loss": train_report["report"]["final_train_loss"],
            "final_val_loss": train_report["report"]["final_val_loss"],
            "epochs": train_report["report"]["epochs"],
        },
        "loss_distribution": {
            "metric": thresholds["metric"],
            "source": thresholds["source"],
            "thresholds": thresholds["values"],
            "fit_quantiles": thresholds["fit_quantiles"],
        },
        "event_timelines": timelines,
        "provenance": {
            "train": train_report["run_config"],
            "detect": summary["run_config"],
        },
    }
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    (out / "report.md").write_text(_markdown_report(report), encoding="utf-8")
    print(f"report written to {out / 'report.json'} and {out / 'report.md'}")
    return 0


def _markdown_report(report):
    fq = report["forecast_quality"]
    ld = report["loss_distribution"]
    lines = [
        "# Run report",
        "",
        "## Forecast quality",
        "",
        f"- held-out R2: {fq['val_r2']:.4f}",
        f"- final training loss: {fq['final_train_loss']:.6f}",
        f"- final validation loss: {fq['final_val_loss']:.6f}",
        f"- epochs: {fq['epochs']}",
        "",
        "## Loss distribution",
        "",
        f"- metric: {ld['metric']} (thresholds from {ld['source']})",
        "- thresholds: " + ", ".join(f"{v:.6g}" for v in ld["thresholds"]),
    ]
    if ld["fit_quantiles"]:
        lines.append("")
        lines.append("| quantile | " + " | ".join(CHANNELS) + " |")
        lines.append("|" + "---|" * (len(CHANNELS) + 1))
        for q in sorted(ld["fit_quantiles"], key=float):
            row = " | ".join(f"{v:.4g}" for v in ld["fit_quantiles"][q])
            lines.append(f"| {q} | {row} |")
    lines += ["", "## Event timelines", ""]
    if not report["event_timelines"]:
        lines.append("No events detected.")
    for trial_id in sorted(report["event_timelines"]):
        events = report["event_timelines"][trial_id]
        lines.append(f"- {trial_id}: " + "; ".join(
            f"[{ev['start_ts']:.2f}s, {ev['end_ts']:.2f}s] "
            f"({', '.join(ev['channels'])})" for ev in events))
    lines += ["", "## Provenance", "", "```json",
              json.dumps(report["provenance"], sort_keys=True, indent=2),
              "```", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def _positive_int(value):
    parsed = int(value)
    if parsed < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return parsed


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tipguard",
        description="Forecast IMU streams and flag tip-over-risk events.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic trial corpus")
    p.add_argument("--preset", default="smoke", choices=PRESETS)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a forecasting model on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", default=None,
                   help="JSON file or inline JSON overriding the default "
                        "training profile")
    p.add_argument("--budget", type=_positive_int, default=50,
                   help="training epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="search hyperparameters on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", default=None,
                   help="JSON with a 'space' document and optional 'profile' "
                        "overrides")
    p.add_argument("--budget", type=_positive_int, default=None,
                   help="maximum epochs per evaluation (default 100)")
    p.add_argument("--min-budget", type=_positive_int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--rho", type=float, default=1.0 / 3.0,
                   help="fraction of configurations drawn at random")
    p.add_argument("--brackets", type=_positive_int, default=None)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("detect", help="scan trials for anomalous windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", default="mse", choices=METRICS)
    p.add_argument("--quantile", type=float, default=0.995)
    p.add_argument("--thresholds", default="fit", choices=("fit", "table4"))
    p.add_argument("--step", type=_positive_int, default=10,
                   help="window stride during scanning")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="consolidate run artifacts")
    p.add_argument("--run", required=True,
                   help="directory holding train and detect artifacts")
    p.add_argument("--out", default=None,
                   help="output directory (defaults to the run directory)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    logging.basicConfig(
        level=getattr(logging, os.environ.get("TIPGUARD_LOG", "WARNING").upper(),
                      logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s", force=True)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
