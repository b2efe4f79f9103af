"""Ingest, normalize, window, and split multivariate IMU streams.

Channel order is fixed everywhere: accel x/y/z in m/s^2, then gyro x/y/z
in rad/s. All arrays are float64 and frozen after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CHANNELS = ("accel_x", "accel_y", "accel_z", "gyro_x", "gyro_y", "gyro_z")
N_CHANNELS = len(CHANNELS)
CSV_HEADER = ("timestamp",) + CHANNELS

ANNOTATIONS = ("normal", "tip_over_risk", "slip", "unlabeled")
# Trials carrying these labels are never eligible for training.
RISK_ANNOTATIONS = ("tip_over_risk", "slip")


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Sample:
    """One IMU reading at time t (seconds)."""

    t: float
    accel_x: float
    accel_y: float
    accel_z: float
    gyro_x: float
    gyro_y: float
    gyro_z: float

    def channels(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in CHANNELS])


@dataclass(frozen=True)
class MultivariateSeries:
    """A timestamped (T, 6) stream of IMU channels.

    Timestamps must be strictly increasing, values finite. The annotation
    is trial-level metadata and is never used as a training signal.
    """

    t: np.ndarray          # (T,) seconds
    values: np.ndarray     # (T, 6)
    nominal_rate: float    # Hz, estimated as 1/median(dt); nan for T == 1
    annotation: str = "unlabeled"
    trial_id: str = ""

    def __post_init__(self):
        t = _frozen(self.t)
        values = _frozen(self.values)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", values)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("timestamps must be a non-empty 1-d array")
        if values.shape != (t.size, N_CHANNELS):
            raise ValueError(
                f"values must have shape ({t.size}, {N_CHANNELS}), got {values.shape}"
            )
        if not np.isfinite(t).all() or not np.isfinite(values).all():
            raise ValueError("series contains non-finite entries")
        if t.size > 1 and not (np.diff(t) > 0).all():
            raise ValueError("timestamps must be strictly increasing")
        if self.annotation not in ANNOTATIONS:
            raise ValueError(f"unknown annotation {self.annotation!r}")

    def __len__(self) -> int:
        return int(self.t.size)

    def sample(self, i: int) -> Sample:
        return Sample(float(self.t[i]), *(float(v) for v in self.values[i]))


def estimate_rate(t: np.ndarray) -> float:
    """Nominal sampling rate as 1/median(dt); nan when fewer than 2 samples."""
    if len(t) < 2:
        return float("nan")
    return float(1.0 / np.median(np.diff(t)))


def series_from_arrays(t, values, annotation="unlabeled", trial_id="") -> MultivariateSeries:
    t = np.asarray(t, dtype=np.float64)
    return MultivariateSeries(t, np.asarray(values, dtype=np.float64),
                              estimate_rate(t), annotation, trial_id)


def ingest_csv(path) -> MultivariateSeries:
    """Parse one trial CSV (schema: timestamp,accel_x,...,gyro_z).

    A sidecar JSON next to the CSV ({"trial_id": ..., "behavior": ...})
    supplies the annotation when present; otherwise the trial is unlabeled.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")

    ts: list[float] = []
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if tuple(header.split(",")) != CSV_HEADER:
            raise DataError(
                f"{path}: header {header!r} does not match {','.join(CSV_HEADER)!r}"
            )
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(CSV_HEADER):
                raise DataError(f"{path}: malformed row {i}: expected "
                                f"{len(CSV_HEADER)} fields, got {len(parts)}")
            try:
                nums = [float(p) for p in parts]
            except ValueError as exc:
                raise DataError(f"{path}: malformed row {i}: {exc}") from exc
            if not all(np.isfinite(nums)):
                raise DataError(f"{path}: non-finite value in row {i}")
            if ts and nums[0] <= ts[-1]:
                raise DataError(f"{path}: non-monotone timestamp in row {i}")
            ts.append(nums[0])
            rows.append(nums[1:])
    if not rows:
        raise DataError(f"{path}: no samples")

    annotation = "unlabeled"
    trial_id = path.stem
    sidecar = path.with_suffix(".json")
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        behavior = meta.get("behavior", "unlabeled")
        if behavior not in ANNOTATIONS:
            raise DataError(f"{sidecar}: unknown behavior {behavior!r}")
        annotation = behavior
        trial_id = meta.get("trial_id", trial_id)

    t = np.array(ts)
    return MultivariateSeries(t, np.array(rows), estimate_rate(t), annotation, trial_id)


@dataclass(frozen=True)
class Normalizer:
    """Per-channel z-score parameters, fitted on training trials only."""

    mean: np.ndarray   # (6,)
    scale: np.ndarray  # (6,) strictly positive

    def __post_init__(self):
        mean = _frozen(self.mean)
        scale = _frozen(self.scale)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        if mean.shape != (N_CHANNELS,) or scale.shape != (N_CHANNELS,):
            raise ValueError("normalizer parameters must have shape (6,)")
        if not (scale > 0).all():
            raise ValueError("normalizer scale must be strictly positive")


def fit_normalizer(train: list[MultivariateSeries]) -> Normalizer:
    """Pooled per-channel mean and population std over the training trials.

    Channels with (near-)zero variance fall back to scale 1.
    """
    if not train:
        raise DataError("cannot fit normalizer on empty trial list")
    pooled = np.concatenate([s.values for s in train], axis=0)
    mean = pooled.mean(axis=0)
    scale = pooled.std(axis=0)  # population std (ddof=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    return Normalizer(mean, scale)


def apply_normalizer(series: MultivariateSeries, norm: Normalizer) -> MultivariateSeries:
    values = (series.values - norm.mean) / norm.scale
    return MultivariateSeries(series.t, values, series.nominal_rate,
                              series.annotation, series.trial_id)


def invert_normalizer(series: MultivariateSeries, norm: Normalizer) -> MultivariateSeries:
    values = series.values * norm.scale + norm.mean
    return MultivariateSeries(series.t, values, series.nominal_rate,
                              series.annotation, series.trial_id)


@dataclass(frozen=True)
class WindowSpec:
    """Strided slicing spec: L_in input steps, L_out forecast steps."""

    input_len: int
    output_len: int
    step: int = 1

    def __post_init__(self):
        if self.input_len < 1 or self.output_len < 1 or self.step < 1:
            raise ValueError("input_len, output_len and step must all be >= 1")

    @property
    def span(self) -> int:
        return self.input_len + self.output_len


@dataclass(frozen=True)
class WindowedDataset:
    """Paired (input, target) windows cut from one or more source series."""

    inputs: np.ndarray                # (N, L_in, 6)
    targets: np.ndarray               # (N, L_out, 6)
    window_start_indices: np.ndarray  # (N,) offsets into the source series

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0] \
                or self.inputs.shape[0] != self.window_start_indices.shape[0]:
            raise ValueError("inputs, targets and start indices disagree on N")

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.inputs[idx], self.targets[idx],
                               self.window_start_indices[idx])


def make_windows(series: MultivariateSeries, spec: WindowSpec) -> WindowedDataset:
    """Slice windows at stride spec.step.

    Window k covers input [k*step, k*step + L_in) and target
    [k*step + L_in, k*step + L_in + L_out); a series shorter than one
    span yields an empty dataset.
    """
    values = series.values
    T = values.shape[0]
    if T < spec.span:
        return WindowedDataset(
            np.empty((0, spec.input_len, N_CHANNELS)),
            np.empty((0, spec.output_len, N_CHANNELS)),
            np.empty((0,), dtype=np.int64),
        )
    starts = np.arange(0, T - spec.span + 1, spec.step, dtype=np.int64)
    inputs = values[starts[:, None] + np.arange(spec.input_len)]
    targets = values[starts[:, None] + spec.input_len + np.arange(spec.output_len)]
    return WindowedDataset(inputs, targets, starts)


def concat_windows(datasets: list[WindowedDataset]) -> WindowedDataset:
    datasets = [d for d in datasets if d.n > 0]
    if not datasets:
        raise DataError("no windows in any dataset")
    return WindowedDataset(
        np.concatenate([d.inputs for d in datasets]),
        np.concatenate([d.targets for d in datasets]),
        np.concatenate([d.window_start_indices for d in datasets]),
    )


def split_trials(trials: list[MultivariateSeries], train_frac: float,
                 seed: int = 0) -> tuple[list[MultivariateSeries], list[MultivariateSeries]]:
    """Whole-trial train/test split, deterministic per seed.

    Trials annotated tip_over_risk or slip are forced into the test set;
    training draws from normal (and unlabeled) trials only.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    if not trials:
        raise DataError("no trials to split")
    eligible = [i for i, s in enumerate(trials) if s.annotation not in RISK_ANNOTATIONS]
    if not eligible:
        raise DataError("no normal trials available for training")
    n_train = int(round(train_frac * len(trials)))
    n_train = max(1, min(n_train, len(eligible)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(eligible))
    chosen = sorted(eligible[i] for i in order[:n_train])
    train = [trials[i] for i in chosen]
    test = [trials[i] for i in range(len(trials)) if i not in set(chosen)]
    return train, test
