"""Synthetic rover-like IMU trials with ground-truth anomaly intervals.

A normal trial is an undulating multichannel waveform: a wheel-frequency
sinusoid (plus a weaker second harmonic) under a shared random-walk phase,
a slow Ornstein-Uhlenbeck attitude drift, and white sensor noise. Occasional
"rough patches" raise the noise floor for a moment without being anomalies —
benign high-dynamics stretches that give the error distribution a realistic
tail. Injected transients come in two kinds: ``tip_over`` (growing gyro ramp
plus an accelerometer step) and ``slip`` (brief 12 Hz burst, mostly on the
accelerometer axes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .timeseries import CSV_HEADER, MultivariateSeries, series_from_arrays

TRANSIENT_KINDS = ("tip_over", "slip")

# fixed per-channel texture (accel_x, accel_y, accel_z, gyro_x, gyro_y, gyro_z)
BASE_AMPLITUDE = np.array([0.9, 0.8, 1.0, 0.8, 0.9, 0.7])
BASE_PHASE = np.array([0.0, 1.1, 2.2, 0.6, 1.7, 2.8])
HARMONIC_FRACTION = 0.3
DRIFT_WEIGHT = np.array([1.0, 1.0, 0.4, 0.3, 0.3, 0.2])

TIP_ACCEL_STEP = np.array([1.0, 0.8, 0.6])
TIP_GYRO_RAMP = np.array([1.0, 1.0, 0.7])
TIP_RAMP_S = 0.15
TIP_RELEASE_FRACTION = 0.25

SLIP_FREQ_HZ = 12.0
SLIP_ACCEL = np.array([1.0, 0.7, 0.4])
SLIP_GYRO = np.array([0.35, 0.3, 0.45])


@dataclass(frozen=True)
class Transient:
    """One injected anomaly: kind, onset (s), duration (s), amplitude."""

    kind: str
    start_s: float
    duration_s: float
    amplitude: float

    def __post_init__(self):
        if self.kind not in TRANSIENT_KINDS:
            raise ValueError(f"unknown transient kind {self.kind!r}")
        if self.duration_s <= 0 or self.start_s < 0:
            raise ValueError("transient must have positive duration and start >= 0")
        if self.amplitude <= 0:
            raise ValueError("transient amplitude must be positive")


@dataclass(frozen=True)
class RoughPatch:
    """Benign noisy stretch: white-noise sigma multiplied by `gain`."""

    start_s: float
    duration_s: float
    gain: float = 20.0

    def __post_init__(self):
        if self.duration_s <= 0 or self.start_s < 0 or self.gain < 1.0:
            raise ValueError("rough patch needs positive duration and gain >= 1")


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float
    rate: float = 100.0
    wheel_freq: float = 2.0
    noise_sigma: object = 0.05  # scalar or per-channel sequence of 6
    drift_scale: float = 0.3
    drift_tau_s: float = 8.0
    phase_jitter: float = 0.01  # rad per sample, random-walk increments
    rough_patches: tuple = ()
    transients: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0 or self.rate <= 0:
            raise ValueError("duration and rate must be positive")
        object.__setattr__(self, "rough_patches", tuple(self.rough_patches))
        object.__setattr__(self, "transients", tuple(self.transients))
        spans = []
        for tr in self.transients:
            if tr.start_s + tr.duration_s > self.duration_s:
                raise ValueError(
                    f"transient at {tr.start_s}s runs past the trial end")
            spans.append((tr.start_s, tr.start_s + tr.duration_s))
        spans.sort()
        for (_, prev_end), (nxt, _) in zip(spans, spans[1:]):
            if nxt < prev_end:
                raise ValueError("transients must not overlap")


@dataclass(frozen=True)
class GroundTruth:
    """Non-overlapping (kind, start index, end index) anomaly intervals."""

    intervals: tuple

    def __post_init__(self):
        ordered = sorted(self.intervals, key=lambda iv: iv[1])
        for (_, _, prev_end), (_, nxt_start, _) in zip(ordered, ordered[1:]):
            if nxt_start < prev_end:
                raise ValueError("ground-truth intervals must not overlap")
        object.__setattr__(self, "intervals", tuple(ordered))

    def of_kind(self, kind):
        return tuple(iv for iv in self.intervals if iv[0] == kind)


def _sample_span(rate, start_s, duration_s, total):
    s0 = int(round(start_s * rate))
    s1 = min(total, s0 + max(1, int(round(duration_s * rate))))
    return s0, s1


def generate(config, annotation="unlabeled", trial_id=""):
    """Produce one trial and its ground truth, deterministically per seed.

    Random draws happen in a fixed order (phase walk, drift innovations,
    white noise) so the waveform is pure in (config, seed).
    """
    rate = config.rate
    T = int(round(config.duration_s * rate))
    t = np.arange(T) / rate
    rng = np.random.default_rng(config.seed)

    phase_walk = np.cumsum(rng.normal(0.0, config.phase_jitter, T))
    drift_eps = rng.normal(size=(T, 6))
    white = rng.normal(size=(T, 6))

    theta = 2.0 * np.pi * config.wheel_freq * t + phase_walk
    values = (BASE_AMPLITUDE * np.sin(theta[:, None] + BASE_PHASE)
              + HARMONIC_FRACTION * BASE_AMPLITUDE
              * np.sin(2.0 * theta[:, None] + 2.0 * BASE_PHASE))

    # Ornstein-Uhlenbeck attitude drift, stationary std = drift_scale
    a = np.exp(-1.0 / (config.drift_tau_s * rate))
    innov = np.sqrt(1.0 - a * a) * config.drift_scale
    drift = np.empty((T, 6))
    level = config.drift_scale * drift_eps[0]
    drift[0] = level
    for k in range(1, T):
        level = a * level + innov * drift_eps[k]
        drift[k] = level
    values += drift * DRIFT_WEIGHT

    sigma = np.broadcast_to(np.asarray(config.noise_sigma, dtype=float), (6,))
    noise_gain = np.ones(T)
    for patch in config.rough_patches:
        s0, s1 = _sample_span(rate, patch.start_s, patch.duration_s, T)
        noise_gain[s0:s1] = np.maximum(noise_gain[s0:s1], patch.gain)
    values += white * sigma * noise_gain[:, None]

    intervals = []
    for tr in config.transients:
        s0, s1 = _sample_span(rate, tr.start_s, tr.duration_s, T)
        n = s1 - s0
        local = np.arange(n) / rate
        release = np.ones(n)
        tail = max(1, int(round(TIP_RELEASE_FRACTION * n)))
        release[n - tail:] = np.linspace(1.0, 0.0, tail)
        if tr.kind == "tip_over":
            ramp = np.minimum(local / TIP_RAMP_S, 1.0) * release
            step = release
            values[s0:s1, 0:3] += tr.amplitude * step[:, None] * TIP_ACCEL_STEP
            values[s0:s1, 3:6] += tr.amplitude * ramp[:, None] * TIP_GYRO_RAMP
        else:  # slip
            envelope = np.sin(np.pi * np.arange(n) / max(1, n - 1)) ** 2
            burst = np.sin(2.0 * np.pi * SLIP_FREQ_HZ * local) * envelope
            values[s0:s1, 0:3] += tr.amplitude * burst[:, None] * SLIP_ACCEL
            values[s0:s1, 3:6] += tr.amplitude * burst[:, None] * SLIP_GYRO
        intervals.append((tr.kind, s0, s1))

    series = series_from_arrays(t, values, annotation=annotation, trial_id=trial_id)
    return series, GroundTruth(intervals=tuple(intervals))


# ---------------------------------------------------------------------------
# named corpora
# ---------------------------------------------------------------------------

PRESETS = ("smoke", "full", "bench")


def _trial_seed(seq):
    return int(seq.generate_state(1, np.uint64)[0])


def _draw_patches(rng, duration_s, count, margin_s, min_gap_s,
                  patch_s=0.7, gain=20.0):
    starts = []
    while len(starts) < count:
        cand = rng.uniform(margin_s, duration_s - margin_s - patch_s)
        if all(abs(cand - s) >= min_gap_s for s in starts):
            starts.append(cand)
    return tuple(RoughPatch(start_s=s, duration_s=patch_s, gain=gain)
                 for s in sorted(starts))


def _mixed_corpus(preset, seed, duration_s, tip_starts, slip_start,
                  tip_duration_s, patch_margin_s, patch_gap_s):
    """7 normal + 2 tip_over + 1 slip trials, per-trial seeds spawned from one root."""
    root = np.random.SeedSequence(seed)
    children = root.spawn(10)
    placement = np.random.default_rng([seed, 0xA11CE])
    out = []
    for k in range(10):
        trial_id = f"{preset}-{k:02d}"
        base = dict(duration_s=duration_s, seed=_trial_seed(children[k]))
        if k < 7:
            cfg = SynthConfig(
                rough_patches=_draw_patches(placement, duration_s, 2,
                                            patch_margin_s, patch_gap_s),
                **base)
            out.append(generate(cfg, annotation="normal", trial_id=trial_id))
        elif k < 9:
            cfg = SynthConfig(
                transients=(Transient("tip_over", tip_starts[k - 7],
                                      tip_duration_s, 4.0),),
                **base)
            out.append(generate(cfg, annotation="tip_over_risk", trial_id=trial_id))
        else:
            cfg = SynthConfig(
                transients=(Transient("slip", slip_start, 0.8, 3.0),),
                **base)
            out.append(generate(cfg, annotation="slip", trial_id=trial_id))
    return out


def corpus(preset, seed=0):
    """Build a named corpus: list of (MultivariateSeries, GroundTruth)."""
    if preset == "smoke":
        root = np.random.SeedSequence(seed)
        children = root.spawn(3)
        specs = [
            (SynthConfig(duration_s=3.0, seed=_trial_seed(children[0])), "normal"),
            (SynthConfig(duration_s=3.0, seed=_trial_seed(children[1]),
                         transients=(Transient("tip_over", 1.5, 0.5, 4.0),)),
             "tip_over_risk"),
            (SynthConfig(duration_s=3.0, seed=_trial_seed(children[2]),
                         transients=(Transient("slip", 1.5, 0.5, 3.0),)),
             "slip"),
        ]
        return [generate(cfg, annotation=ann, trial_id=f"smoke-{k:02d}")
                for k, (cfg, ann) in enumerate(specs)]
    if preset == "full":
        return _mixed_corpus(preset, seed, duration_s=250.0,
                             tip_starts=(100.0, 162.5), slip_start=120.0,
                             tip_duration_s=2.0,
                             patch_margin_s=10.0, patch_gap_s=30.0)
    if preset == "bench":
        return _mixed_corpus(preset, seed, duration_s=50.0,
                             tip_starts=(20.0, 32.5), slip_start=25.0,
                             tip_duration_s=1.5,
                             patch_margin_s=5.0, patch_gap_s=10.0)
    raise DataError(f"unknown corpus preset {preset!r}; known: {PRESETS}")


# ---------------------------------------------------------------------------
# on-disk form (same CSV + sidecar layout the ingestion path reads)
# ---------------------------------------------------------------------------


def write_corpus(trials, out_dir):
    """Write CSVs, annotation sidecars, and groundtruth.json; return a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    truth = {}
    total = 0
    for series, gt in trials:
        if not series.trial_id:
            raise DataError("every trial needs a trial_id to be written")
        csv_path = out_dir / f"{series.trial_id}.csv"
        table = np.column_stack([series.t, series.values])
        np.savetxt(csv_path, table, fmt="%.12g", delimiter=",",
                   header=",".join(CSV_HEADER), comments="")
        sidecar = out_dir / f"{series.trial_id}.json"
        sidecar.write_text(json.dumps(
            {"trial_id": series.trial_id, "behavior": series.annotation},
            sort_keys=True) + "\n", encoding="utf-8")
        truth[series.trial_id] = [[kind, int(s0), int(s1)]
                                  for kind, s0, s1 in gt.intervals]
        files.append(csv_path.name)
        total += len(series)
    gt_path = out_dir / "groundtruth.json"
    gt_path.write_text(json.dumps(truth, sort_keys=True, indent=2) + "\n",
                       encoding="utf-8")
    return {"n_trials": len(trials), "total_samples": total,
            "files": sorted(files), "groundtruth": gt_path.name}


def read_groundtruth(path):
    """Load groundtruth.json back into {trial_id: GroundTruth}."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {tid: GroundTruth(intervals=tuple((k, int(s0), int(s1))
                                             for k, s0, s1 in ivs))
            for tid, ivs in doc.items()}
