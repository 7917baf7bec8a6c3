import io
import wave
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meetsync.errors import ConfigurationError
from meetsync.simdev import (
    AnchorOutliers,
    Dropout,
    FaultSpec,
    GroundTruthClock,
    Modality,
    StreamDescriptor,
    calibration_pcm,
    default_streams,
    default_truths,
    derive_seed,
    device_time,
    emit_anchor_pulses,
    frame_log_anchors,
    generate_stream,
    inject_faults,
    pulse_schedule,
    read_raw_stream,
    wav_bytes,
)
from meetsync.syncfit import fit_clock_model
from meetsync.timeline import Tier

GAZE = StreamDescriptor("gaze_P1", "tobii_P1", "P1", Modality.GAZE, 100.0, ("gaze_x", "gaze_y", "pupil_mm"))


def test_device_time_inverts_affine_map():
    truth = GroundTruthClock("d", 0.5, 50.0)
    # t_auth = 0.5 + (1 + 50e-6) * t_dev  =>  t_dev = (t_auth - 0.5) / 1.00005
    expected = (Fraction(1000.55) - Fraction(0.5)) / (1 + Fraction(50, 10**6))
    assert device_time(truth, 1000.55) == pytest.approx(float(expected), abs=1e-12)


def test_device_time_jitter_statistics():
    truth = GroundTruthClock("d", 0.0, 0.0, 0.0005, seed=3)
    t = np.arange(100000, dtype=float)
    err = device_time(truth, t) - t
    assert abs(err.mean()) < 1e-5
    assert err.std() == pytest.approx(0.0005, rel=0.02)


def test_drift_bounds():
    with pytest.raises(ConfigurationError):
        GroundTruthClock("d", 0.0, -1e6)


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, "a", "b") == derive_seed(1, "a", "b")
    assert len({derive_seed(1, "a"), derive_seed(1, "b"), derive_seed(2, "a"), derive_seed(1, "a", "b")}) == 4


class TestGenerateStream:
    def test_sample_count_and_spacing(self):
        s = generate_stream(GAZE, GroundTruthClock("tobii_P1"), (0.0, 60.0), 1)
        assert len(s) == 6000
        np.testing.assert_allclose(np.diff(s.t_auth_true), 0.01, atol=1e-12)
        np.testing.assert_array_equal(s.t_device, s.t_auth_true)
        assert s.values.shape == (6000, 3)

    def test_video_frame_index(self):
        desc = StreamDescriptor("video_P1", "cam_P1", "P1", Modality.VIDEO_FRAMES, 30.0, ("frame_index",))
        s = generate_stream(desc, GroundTruthClock("cam_P1"), (10.0, 20.0), 1)
        assert len(s) == 300
        np.testing.assert_array_equal(s.values[:, 0], np.arange(300))

    def test_deterministic(self):
        truth = GroundTruthClock("tobii_P1", 0.3, 20.0, 0.0005, seed=9)
        a = generate_stream(GAZE, truth, (0.0, 30.0), 5)
        b = generate_stream(GAZE, truth, (0.0, 30.0), 5)
        assert a.raw_tsv() == b.raw_tsv()

    def test_device_mismatch(self):
        with pytest.raises(ConfigurationError):
            generate_stream(GAZE, GroundTruthClock("other"), (0.0, 1.0), 0)

    def test_raw_round_trip(self):
        s = generate_stream(GAZE, GroundTruthClock("tobii_P1", 0.2, 10, 0.0005, 1), (0.0, 5.0), 2)
        t_dev, values = read_raw_stream(GAZE, s.raw_tsv())
        np.testing.assert_allclose(t_dev, s.t_device, atol=5e-7)
        np.testing.assert_allclose(values, s.values, atol=5e-7)

    @given(st.floats(-1, 1), st.floats(-100, 100), st.integers(0, 2**32))
    @settings(max_examples=30, deadline=None)
    def test_monotone_under_small_jitter(self, offset, drift, seed):
        truth = GroundTruthClock("tobii_P1", offset, drift, 0.0005, seed)
        s = generate_stream(GAZE, truth, (0.0, 20.0), seed)
        assert np.all(np.diff(s.t_device) > 0)


class TestAnchors:
    def test_pulse_schedule(self):
        assert pulse_schedule((0.0, 90.0), 30.0) == [0.0, 30.0, 60.0, 90.0]
        assert pulse_schedule((0.0, 100.0), 30.0) == [0.0, 30.0, 60.0, 90.0]

    def test_emit_pulses_zero_jitter_exact(self):
        truth = GroundTruthClock("d", 0.4, -30.0)
        anchors = emit_anchor_pulses([0.0, 30.0, 60.0], [truth], Tier.LSL)
        assert [a.t_auth_s for a in anchors] == [0.0, 30.0, 60.0]
        for a in anchors:
            assert 0.4 + (1 - 30e-6) * a.t_device_s == pytest.approx(a.t_auth_s, abs=1e-12)

    def test_zero_jitter_fit_recovers_truth(self):
        truth = GroundTruthClock("d", -0.7, 80.0)
        m = fit_clock_model(emit_anchor_pulses(pulse_schedule((0, 1800), 30), [truth], Tier.LSL))
        assert m.offset_s == pytest.approx(-0.7, abs=1e-9)
        assert m.drift_ppm == pytest.approx(80.0, abs=1e-6)

    def test_frame_log_anchors(self):
        desc = StreamDescriptor("video_P1", "cam_P1", "P1", Modality.VIDEO_FRAMES, 30.0, ("frame_index",))
        s = generate_stream(desc, GroundTruthClock("cam_P1"), (0.0, 10.0), 1)
        anchors = frame_log_anchors(s, every=30)
        assert len(anchors) == 10
        assert {a.tier for a in anchors} == {Tier.FRAME_LOG}


class TestFaults:
    def setup_method(self):
        self.stream = generate_stream(GAZE, GroundTruthClock("tobii_P1"), (0.0, 60.0), 1)

    def test_dropout_removes_window(self):
        spec = FaultSpec(dropouts=(Dropout("gaze_P1", 10.0, 0.5),))
        out, _, log = inject_faults({"gaze_P1": self.stream}, [], spec, 0)
        s = out["gaze_P1"]
        assert len(s) == 6000 - 50
        assert not np.any((s.t_auth_true >= 10.0) & (s.t_auth_true < 10.5))
        assert log.dropouts[0]["samples_removed"] == 50
        assert len(self.stream) == 6000  # input untouched

    def test_thirty_second_dropout_count(self):
        spec = FaultSpec(dropouts=(Dropout("gaze_P1", 20.0, 30.0),))
        _, _, log = inject_faults({"gaze_P1": self.stream}, [], spec, 0)
        assert log.dropouts[0]["samples_removed"] == 3000

    def test_dropout_outside_span(self):
        spec = FaultSpec(dropouts=(Dropout("gaze_P1", 50.0, 30.0),))
        with pytest.raises(ConfigurationError):
            inject_faults({"gaze_P1": self.stream}, [], spec, 0, session_span=(0.0, 60.0))

    def test_unknown_stream(self):
        with pytest.raises(ConfigurationError):
            inject_faults({}, [], FaultSpec(dropouts=(Dropout("nope", 0.0, 1.0),)), 0)

    def test_missing_stream(self):
        out, _, log = inject_faults({"gaze_P1": self.stream}, [], FaultSpec(missing_streams=("gaze_P1",)), 0)
        assert out == {} and log.missing_streams == ["gaze_P1"]

    def test_anchor_outliers(self):
        truth = GroundTruthClock("d")
        anchors = emit_anchor_pulses(pulse_schedule((0, 1770), 30), [truth], Tier.LSL)
        assert len(anchors) == 60
        _, biased, log = inject_faults({}, anchors, FaultSpec(anchor_outliers=AnchorOutliers(0.1, 0.1)), 4)
        moved = [b for a, b in zip(anchors, biased) if a != b]
        assert len(moved) == 6 and len(log.anchor_outliers) == 6
        for b in moved:
            assert b.t_device_s - b.t_auth_s == pytest.approx(0.1, abs=1e-12)

    def test_spec_round_trip(self):
        spec = FaultSpec((Dropout("a", 1.0, 2.0),), AnchorOutliers(0.1, 0.1), ("b",))
        assert FaultSpec.from_dict(spec.to_dict()) == spec

    def test_malformed_spec(self):
        with pytest.raises(ConfigurationError):
            FaultSpec.from_dict({"dropouts": [{"stream_id": "a"}]})


class TestDefaultRig:
    def test_stream_inventory(self):
        streams = default_streams()
        by_mod = {}
        for d in streams:
            by_mod.setdefault(d.modality, []).append(d)
        assert len(by_mod[Modality.GAZE]) == 4
        assert len(by_mod[Modality.PHYSIO]) == 4
        assert len(by_mod[Modality.VIDEO_FRAMES]) == 7
        assert len(by_mod[Modality.AUDIO_BLOCKS]) == 5
        assert len(by_mod[Modality.MARKERS]) == 1
        assert len(streams) == 21

    def test_truth_ranges(self):
        truths = default_truths(default_streams(), 11)
        for t in truths:
            if t.device_id == "host":
                assert (t.true_offset_s, t.true_drift_ppm, t.jitter_sigma_s) == (0, 0, 0)
            else:
                assert -1 <= t.true_offset_s <= 1 and -100 <= t.true_drift_ppm <= 100
        assert truths == default_truths(default_streams(), 11)
        assert truths != default_truths(default_streams(), 12)


def test_calibration_wav():
    pcm = calibration_pcm(1)
    assert pcm.size == 3 * 48000
    data = wav_bytes(pcm)
    with wave.open(io.BytesIO(data)) as w:
        assert (w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()) == (1, 2, 48000, 144000)
    peak = np.max(np.abs(pcm[48000:]))
    assert 20 * np.log10(peak) == pytest.approx(-12.0, abs=0.05)
