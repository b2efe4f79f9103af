"""Turn forecast errors into tip-over-risk events.

Per-window, per-channel forecast errors (MSE/MAE over the forecast horizon,
in normalized space) are collected from training data into an error
distribution; thresholds are its per-channel quantiles (or a fixed preset).
Detection slides windows over a trial, flags any window where at least one
channel exceeds its threshold, and merges consecutive flagged windows
(tolerating single-window gaps) into events indexed over the forecast span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autoencoder import forecast_batch
from .errors import DataError
from .timeseries import CHANNELS, apply_normalizer, make_windows

METRICS = ("mse", "mae")
SUMMARY_QUANTILES = (0.5, 0.9, 0.95, 0.99, 0.995)
MIN_FIT_SAMPLES = 100

# fixed reference thresholds for comparison runs
PRESET_THRESHOLDS = {
    "mse": (0.04, 0.04, 0.04, 0.02, 0.05, 0.04),
    "mae": (0.25, 0.25, 0.25, 0.25, 0.25, 0.25),
}


@dataclass(frozen=True)
class ChannelErrors:
    """Forecast errors per evaluated window and channel."""

    window_start_indices: np.ndarray  # (N,)
    mse: np.ndarray  # (N, 6)
    mae: np.ndarray  # (N, 6)

    @property
    def n(self):
        return self.mse.shape[0]


def window_errors(prediction, target):
    """Per-channel (mse, mae) of one forecast window (L_out, C)."""
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    return np.mean(diff * diff, axis=0), np.mean(np.abs(diff), axis=0)


def compute_errors(model, dataset):
    """Evaluate the model on every window of an already-normalized dataset."""
    spec = model.spec
    if dataset.inputs.shape[1:] != (spec.input_len, spec.channels):
        raise DataError(
            f"window shape {dataset.inputs.shape[1:]} does not match model spec "
            f"({spec.input_len}, {spec.channels})")
    predictions = forecast_batch(model, dataset.inputs)
    diff = predictions - dataset.targets
    return ChannelErrors(
        window_start_indices=np.asarray(dataset.window_start_indices),
        mse=np.mean(diff * diff, axis=1),
        mae=np.mean(np.abs(diff), axis=1))


@dataclass(frozen=True)
class LossDistribution:
    """Sorted training-error samples per channel, for both metrics."""

    mse_sorted: np.ndarray  # (N, 6), ascending per column
    mae_sorted: np.ndarray
    quantiles: dict  # {"mse": {q: (6,) array}, "mae": {...}}

    @property
    def n(self):
        return self.mse_sorted.shape[0]


def fit_distribution(errors):
    """Summarize training-prediction errors; needs >= 100 windows per channel."""
    if errors.n < MIN_FIT_SAMPLES:
        raise DataError(
            f"threshold fitting needs >= {MIN_FIT_SAMPLES} windows, "
            f"got {errors.n}")
    for name, matrix in (("mse", errors.mse), ("mae", errors.mae)):
        dead = np.where(matrix.max(axis=0) == 0.0)[0]
        if dead.size:
            raise DataError(
                f"all-zero {name} errors on channel(s) "
                f"{[CHANNELS[c] for c in dead]}: degenerate fit "
                "(checks for leakage or an overfit model)")
    mse_sorted = np.sort(errors.mse, axis=0)
    mae_sorted = np.sort(errors.mae, axis=0)
    quantiles = {
        "mse": {q: np.quantile(mse_sorted, q, axis=0) for q in SUMMARY_QUANTILES},
        "mae": {q: np.quantile(mae_sorted, q, axis=0) for q in SUMMARY_QUANTILES},
    }
    return LossDistribution(mse_sorted, mae_sorted, quantiles)


@dataclass(frozen=True)
class ThresholdSet:
    metric: str
    values: tuple  # per-channel, ordered as CHANNELS

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        values = tuple(float(v) for v in self.values)
        if len(values) != len(CHANNELS):
            raise ValueError(f"need {len(CHANNELS)} thresholds, got {len(values)}")
        if any(v <= 0 for v in values):
            raise ValueError("thresholds must be strictly positive")
        object.__setattr__(self, "values", values)


def select_thresholds(dist, metric, quantile=0.995):
    """Per-channel quantile of the fitted error distribution."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    samples = dist.mse_sorted if metric == "mse" else dist.mae_sorted
    return ThresholdSet(metric=metric,
                        values=tuple(np.quantile(samples, quantile, axis=0)))


def preset_thresholds(metric):
    """The fixed reference threshold table (normalized-space values)."""
    if metric not in PRESET_THRESHOLDS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    return ThresholdSet(metric=metric, values=PRESET_THRESHOLDS[metric])


# ---------------------------------------------------------------------------
# event extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnomalyEvent:
    """One merged run of anomalous windows, indexed over the forecast span."""

    start: int  # first source timestep covered by a flagged forecast
    end: int  # one past the last covered timestep
    metric: str
    channels: tuple  # triggering channel names
    peak_errors: tuple  # max error per triggering channel

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("event must cover at least one timestep")
        if not self.channels:
            raise ValueError("event needs at least one triggering channel")


def flag_windows(errors_matrix, threshold_values):
    """(flagged (N,), exceed (N, 6)): any-channel trigger rule."""
    exceed = np.asarray(errors_matrix) > np.asarray(threshold_values)
    return exceed.any(axis=1), exceed


def merge_flags(flags, gap_tolerance=1):
    """Merge flagged window slots into inclusive (first, last) runs.

    Runs separated by at most `gap_tolerance` unflagged slots fuse, so one
    physical transient with a momentary dip stays a single event.
    """
    runs = []
    current = None
    for i in np.flatnonzero(np.asarray(flags)):
        if current is not None and i - current[1] <= gap_tolerance + 1:
            current[1] = i
        else:
            if current is not None:
                runs.append(tuple(current))
            current = [i, i]
    if current is not None:
        runs.append(tuple(current))
    return runs


def detect(model, series, thresholds, spec):
    """Scan one trial for anomalies; returns events in source-timestep indexing."""
    if model.normalizer is None:
        raise DataError("model carries no normalizer; fit one before detecting")
    if (spec.input_len, spec.output_len) != (model.spec.input_len,
                                             model.spec.output_len):
        raise DataError(
            f"window spec ({spec.input_len}, {spec.output_len}) does not match "
            f"model spec ({model.spec.input_len}, {model.spec.output_len})")
    normalized = apply_normalizer(series, model.normalizer)
    dataset = make_windows(normalized, spec)
    if dataset.n == 0:
        return []
    errors = compute_errors(model, dataset)
    matrix = errors.mse if thresholds.metric == "mse" else errors.mae
    flagged, exceed = flag_windows(matrix, thresholds.values)

    events = []
    for first, last in merge_flags(flagged, gap_tolerance=1):
        cols = np.flatnonzero(exceed[first:last + 1].any(axis=0))
        peaks = matrix[first:last + 1, cols].max(axis=0)
        start = int(errors.window_start_indices[first]) + spec.input_len
        end = (int(errors.window_start_indices[last])
               + spec.input_len + spec.output_len)
        events.append(AnomalyEvent(
            start=start, end=end, metric=thresholds.metric,
            channels=tuple(CHANNELS[c] for c in cols),
            peak_errors=tuple(float(p) for p in peaks)))
    return events


def score_events(events, truth, slack):
    """Match events against ground truth with ±slack timesteps of leeway."""
    matched = set()
    false_positives = []
    for ev in events:
        hits = [i for i, (_, s0, s1) in enumerate(truth.intervals)
                if ev.start < s1 + slack and ev.end > s0 - slack]
        if hits:
            matched.update(hits)
        else:
            false_positives.append(ev)

    recall = {}
    for kind in sorted({kind for kind, _, _ in truth.intervals}):
        idxs = [i for i, (k, _, _) in enumerate(truth.intervals) if k == kind]
        recall[kind] = sum(1 for i in idxs if i in matched) / len(idxs)
    return {
        "recall": recall,
        "n_matched_intervals": len(matched),
        "n_false_positives": len(false_positives),
        "false_positives": false_positives,
    }
