import numpy as np
import pytest

from tipguard.errors import DataError
from tipguard.synth import (
    GroundTruth,
    RoughPatch,
    SynthConfig,
    Transient,
    corpus,
    generate,
    read_groundtruth,
    write_corpus,
)
from tipguard.timeseries import ingest_csv


def interval_energy(series, s0, s1):
    """Per-channel mean squared value over [s0, s1)."""
    return np.mean(series.values[s0:s1] ** 2, axis=0)


class TestGenerate:
    def test_pure_tone_fft_peak_at_wheel_frequency(self):
        cfg = SynthConfig(duration_s=10.0, noise_sigma=0.0, drift_scale=0.0,
                          phase_jitter=0.0)
        series, _ = generate(cfg)
        spectrum = np.abs(np.fft.rfft(series.values, axis=0))
        freqs = np.fft.rfftfreq(len(series), d=1.0 / cfg.rate)
        for c in range(6):
            assert freqs[np.argmax(spectrum[:, c])] == pytest.approx(2.0)

    def test_tip_over_interval_indices(self):
        cfg = SynthConfig(duration_s=60.0,
                          transients=(Transient("tip_over", 30.0, 2.0, 4.0),))
        _, gt = generate(cfg)
        assert gt.intervals == (("tip_over", 3000, 3200),)

    def test_deterministic_per_seed(self):
        cfg = SynthConfig(duration_s=5.0, seed=123,
                          transients=(Transient("slip", 2.0, 0.5, 3.0),))
        a, _ = generate(cfg)
        b, _ = generate(cfg)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.t, b.t)

    def test_different_seeds_differ(self):
        a, _ = generate(SynthConfig(duration_s=2.0, seed=1))
        b, _ = generate(SynthConfig(duration_s=2.0, seed=2))
        assert not np.array_equal(a.values, b.values)

    def test_normal_segments_stationary(self):
        series, _ = generate(SynthConfig(duration_s=120.0, seed=7))
        values = series.values
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        w = 500  # 5 s at 100 Hz
        for start in range(0, len(series) - w, 100):
            window_mean = values[start:start + w].mean(axis=0)
            assert np.all(np.abs(window_mean - mean) < 3.0 * std)

    @pytest.mark.parametrize("kind,amp", [("tip_over", 4.0), ("slip", 3.0)])
    def test_transient_energy_exceeds_baseline_on_every_channel(self, kind, amp):
        cfg = SynthConfig(duration_s=30.0, seed=11,
                          transients=(Transient(kind, 15.0, 1.0, amp),))
        series, gt = generate(cfg)
        _, s0, s1 = gt.intervals[0]
        n = s1 - s0
        inside = interval_energy(series, s0, s1)
        before = interval_energy(series, s0 - n, s0)
        after = interval_energy(series, s1, s1 + n)
        assert np.all(inside > before)
        assert np.all(inside > after)

    def test_rough_patch_raises_local_variance(self):
        base = SynthConfig(duration_s=30.0, seed=13)
        patched = SynthConfig(duration_s=30.0, seed=13,
                              rough_patches=(RoughPatch(15.0, 0.7, gain=8.0),))
        quiet, _ = generate(base)
        rough, _ = generate(patched)
        s0, s1 = 1500, 1570
        # identical outside the patch, noisier inside
        assert np.array_equal(quiet.values[:s0], rough.values[:s0])
        assert np.array_equal(quiet.values[s1:], rough.values[s1:])
        diff = rough.values[s0:s1] - quiet.values[s0:s1]
        assert np.all(diff.std(axis=0) > 0.2)  # ~7x the 0.05 noise floor

    def test_transient_past_end_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(duration_s=10.0,
                        transients=(Transient("slip", 9.8, 0.5, 1.0),))

    def test_overlapping_transients_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(duration_s=20.0,
                        transients=(Transient("slip", 5.0, 1.0, 1.0),
                                    Transient("tip_over", 5.5, 1.0, 1.0)))

    def test_bad_transient_fields_rejected(self):
        with pytest.raises(ValueError):
            Transient("wobble", 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            Transient("slip", 1.0, 1.0, -2.0)

    def test_overlapping_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            GroundTruth(intervals=(("slip", 0, 100), ("tip_over", 50, 150)))


class TestCorpus:
    def test_smoke_is_three_short_trials(self):
        trials = corpus("smoke", seed=0)
        assert len(trials) == 3
        total_seconds = sum(len(s) for s, _ in trials) / 100.0
        assert total_seconds < 10.0
        assert [s.annotation for s, _ in trials] == [
            "normal", "tip_over_risk", "slip"]

    def test_full_preset_scale_and_mix(self):
        trials = corpus("full", seed=0)
        assert len(trials) == 10
        assert sum(len(s) for s, _ in trials) == 250_000
        annotations = [s.annotation for s, _ in trials]
        assert annotations.count("normal") == 7
        assert annotations.count("tip_over_risk") == 2
        assert annotations.count("slip") == 1
        for series, gt in trials:
            if series.annotation == "normal":
                assert gt.intervals == ()
            else:
                assert len(gt.intervals) == 1

    def test_same_seed_bitwise_identical(self):
        a = corpus("bench", seed=5)
        b = corpus("bench", seed=5)
        for (sa, _), (sb, _) in zip(a, b):
            assert np.array_equal(sa.values, sb.values)

    def test_trials_mutually_distinct(self):
        trials = corpus("bench", seed=0)
        v0 = trials[0][0].values
        assert all(not np.array_equal(v0, s.values) for s, _ in trials[1:])

    def test_unknown_preset_rejected(self):
        with pytest.raises(DataError, match="preset"):
            corpus("gravel", seed=0)


class TestWriteCorpus:
    def test_round_trip_through_ingestion(self, tmp_path):
        trials = corpus("smoke", seed=3)
        manifest = write_corpus(trials, tmp_path)
        assert manifest["n_trials"] == 3
        assert len(manifest["files"]) == 3

        for series, _ in trials:
            back = ingest_csv(tmp_path / f"{series.trial_id}.csv")
            assert back.annotation == series.annotation
            assert back.trial_id == series.trial_id
            assert np.abs(back.values - series.values).max() < 1e-9

        truth = read_groundtruth(tmp_path / "groundtruth.json")
        assert truth["smoke-01"].intervals == (("tip_over", 150, 200),)
        assert truth["smoke-00"].intervals == ()

    def test_rewrite_is_byte_identical(self, tmp_path):
        trials = corpus("smoke", seed=4)
        write_corpus(trials, tmp_path / "a")
        write_corpus(trials, tmp_path / "b")
        for name in ["smoke-00.csv", "smoke-01.json", "groundtruth.json"]:
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()
