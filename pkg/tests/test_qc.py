import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meetsync.qc import (
    Finding,
    Severity,
    Status,
    audio_metrics,
    detect_gaps,
    json_float,
    preflight,
    read_pcm,
    session_summary,
)
from meetsync.simdev import wav_bytes
from meetsync.syncfit import AnchorPool, validate_session_alignment
from meetsync.timeline import ClockModel, Tier

RATE = 48000


def sine(amplitude, freq=1000.0, seconds=1.0):
    t = np.arange(int(seconds * RATE)) / RATE
    return amplitude * np.sin(2 * np.pi * freq * t)


class TestPreflight:
    def test_missing_is_fatal(self):
        r = preflight(["a", "b"], ["a"])
        assert not r.passed
        assert [(f.severity, f.subject) for f in r.findings] == [(Severity.FATAL, "b")]

    def test_extra_is_warning(self):
        r = preflight(["a"], ["a", "z"])
        assert r.passed
        assert [(f.severity, f.subject) for f in r.findings] == [(Severity.WARNING, "z")]


class TestGaps:
    def test_clean_stream(self):
        res = detect_gaps(np.arange(1000) / 100.0, 100.0)
        assert res.gaps == () and not res.insufficient_data

    def test_single_dropout(self):
        t = np.arange(1000) / 100.0
        t = t[(t < 5.0) | (t >= 5.5)]
        (g,) = detect_gaps(t, 100.0).gaps
        # last sample before is 4.99, next is 5.50: the 50 samples 5.00..5.49 are gone
        assert g.gap_start_auth_s == pytest.approx(5.0, abs=1e-9)
        assert g.gap_duration_s == pytest.approx(0.5, abs=1e-9)
        assert g.expected_samples_missing == 50

    def test_threshold(self):
        t = np.arange(100) / 100.0
        two_missing = np.delete(t, [50, 51])  # delta = 3 periods: not above threshold
        assert detect_gaps(two_missing, 100.0).gaps == ()
        three_missing = np.delete(t, [50, 51, 52])
        assert len(detect_gaps(three_missing, 100.0).gaps) == 1

    def test_edges_with_span(self):
        t = np.arange(100, 900) / 100.0
        res = detect_gaps(t, 100.0, span=(0.0, 10.0))
        assert [(round(g.gap_start_auth_s, 9), g.expected_samples_missing) for g in res.gaps] == [(0.0, 100), (9.0, 100)]

    def test_insufficient(self):
        assert detect_gaps([1.0], 100.0).insufficient_data

    def test_bad_k(self):
        with pytest.raises(ValueError):
            detect_gaps([0, 1], 1.0, k_intervals=1)

    @given(st.lists(st.tuples(st.integers(10, 9000), st.integers(3, 200)), max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_precision_recall(self, drops):
        # non-overlapping drops separated by kept samples
        n = 10000
        keep = np.ones(n, bool)
        truth = []
        for start, length in sorted(drops):
            lo, hi = start, min(start + length, n - 1)
            if keep[max(lo - 1, 0):hi + 1].all() and hi - lo >= 3:
                keep[lo:hi] = False
                truth.append((lo, hi - lo))
        t = (np.arange(n) / 100.0)[keep]
        found = [(int(round(g.gap_start_auth_s * 100)), g.expected_samples_missing) for g in detect_gaps(t, 100.0).gaps]
        assert found == sorted(truth)


class TestAudio:
    def test_sine_peak(self):
        a = audio_metrics(sine(0.25), RATE)
        assert a.peak_dbfs == pytest.approx(20 * math.log10(0.25), abs=1e-6)
        assert a.peak_dbfs == pytest.approx(-12.0412, abs=0.001)
        assert a.rms_dbfs == pytest.approx(20 * math.log10(0.25 / math.sqrt(2)), abs=1e-6)
        assert a.clipping_sample_count == 0 and a.flags == ()

    def test_snr_closed_form(self):
        sigma = 0.001
        noise = sigma * np.where(np.arange(RATE) % 2, 1.0, -1.0)
        pcm = np.concatenate([noise, sine(0.25)])
        a = audio_metrics(pcm, RATE, (0.0, 1.0), (1.0, 2.0))
        assert a.snr_db == pytest.approx(20 * math.log10(0.25 / math.sqrt(2) / sigma), abs=1e-6)

    def test_clipping_and_silence(self):
        assert audio_metrics(np.array([0.0, 1.0, -1.0, 0.5]), RATE).clipping_sample_count == 2
        a = audio_metrics(np.zeros(10), RATE)
        assert a.peak_dbfs == -math.inf and "silent" in a.flags
        assert a.to_dict()["peak_dbfs"] == "-inf"

    def test_zero_noise_floor(self):
        pcm = np.concatenate([np.zeros(RATE), sine(0.1)])
        a = audio_metrics(pcm, RATE, (0.0, 1.0), (1.0, 2.0))
        assert a.snr_db == math.inf and "zero_noise_floor" in a.flags

    def test_bad_windows(self):
        with pytest.raises(ValueError):
            audio_metrics(sine(0.1), RATE, (0.0, 0.6), (0.5, 1.0))
        with pytest.raises(ValueError):
            audio_metrics(sine(0.1), RATE, (0.0, 0.5), (0.5, 2.0))

    def test_read_wav(self, tmp_path):
        p = tmp_path / "x.wav"
        p.write_bytes(wav_bytes(sine(0.25), RATE))
        pcm, rate = read_pcm(p)
        assert rate == RATE
        assert audio_metrics(pcm, rate).peak_dbfs == pytest.approx(-12.0412, abs=0.01)

    def test_read_f32(self, tmp_path):
        p = tmp_path / "x.f32"
        p.write_bytes(sine(0.25).astype("<f4").tobytes())
        with pytest.raises(ValueError):
            read_pcm(p)
        pcm, _ = read_pcm(p, RATE)
        assert audio_metrics(pcm, RATE).peak_dbfs == pytest.approx(-12.0412, abs=0.001)

    def test_read_unsupported(self, tmp_path):
        with pytest.raises(ValueError):
            read_pcm(tmp_path / "x.mp3")


def test_json_float():
    assert json_float(1.5) == 1.5
    assert [json_float(v) for v in (math.inf, -math.inf, math.nan)] == ["inf", "-inf", "nan"]


class TestSummary:
    def test_empty_is_ok(self):
        s = session_summary()
        assert s.status is Status.OK and s.exit_code == 0

    def test_warning(self):
        s = session_summary(preflight_report=preflight(["a"], ["a", "b"]))
        assert s.exit_code == 1

    def test_fatal_on_missing(self):
        s = session_summary(preflight_report=preflight(["a"], []))
        assert s.exit_code == 2
        assert s.findings[0].subject == "a"

    def test_gap_severity(self):
        t = np.concatenate([np.arange(0, 100) / 100.0, np.arange(200, 300) / 100.0, np.arange(1000, 1100) / 100.0])
        s = session_summary(gap_report={"g": detect_gaps(t, 100.0)}, max_gap_s=5.0)
        assert [f.severity for f in s.findings] == [Severity.WARNING, Severity.FATAL]
        assert s.exit_code == 2

    def test_unaligned_device(self):
        report = validate_session_alignment({"d": ClockModel.unaligned("d")}, AnchorPool())
        s = session_summary(timing_report=report)
        assert [f.code for f in s.findings] == ["device_unaligned"]

    def test_serializable(self):
        s = session_summary(preflight_report=preflight(["a"], []), audio_qc={"m": audio_metrics(np.zeros(4), RATE)})
        json.dumps(s.to_dict(), allow_nan=False)

    @given(st.lists(st.sampled_from([Severity.WARNING, Severity.FATAL]), max_size=5), st.sampled_from(list(Severity)))
    def test_adding_finding_never_lowers_status(self, sevs, extra):
        from meetsync.qc import _status

        base = [Finding(s, "c", "m") for s in sevs]
        before = _status(base).exit_code
        assert _status(base + [Finding(extra, "c", "m")]).exit_code >= before
