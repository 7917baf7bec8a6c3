"""Quality control: pre-flight availability, gaps, audio levels and the session verdict.

QC only reports. It never drops, repairs or rewrites data.
"""
from __future__ import annotations

import enum
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels

CLIP_THRESHOLD = 0.999
DEFAULT_K_INTERVALS = 3
DEFAULT_MAX_GAP_S = 5.0
PEAK_TARGET_DBFS = -12.0

EXIT_OK, EXIT_WARNINGS, EXIT_FATAL = 0, 1, 2


class Severity(str, enum.Enum):
    WARNING = "warning"
    FATAL = "fatal"


class Status(str, enum.Enum):
    OK = "ok"
    WARNINGS = "warnings"
    FATAL = "fatal"

    @property
    def exit_code(self) -> int:
        return {Status.OK: EXIT_OK, Status.WARNINGS: EXIT_WARNINGS, Status.FATAL: EXIT_FATAL}[self]


@dataclass(frozen=True)
class Finding:
    severity: Severity
    code: str
    message: str
    subject: str | None = None

    def to_dict(self) -> dict:
        return {"severity": Severity(self.severity).value, "code": self.code, "message": self.message, "subject": self.subject}


@dataclass(frozen=True)
class PreflightReport:
    expected: tuple
    discovered: tuple
    findings: tuple

    @property
    def passed(self) -> bool:
        return not any(f.severity is Severity.FATAL for f in self.findings)

    def to_dict(self) -> dict:
        return {
            "expected": list(self.expected),
            "discovered": list(self.discovered),
            "findings": [f.to_dict() for f in self.findings],
            "pass": self.passed,
        }


def preflight(expected: Iterable[str], discovered: Iterable[str]) -> PreflightReport:
    """Expected streams that are absent are fatal; unexpected extras are warnings."""
    exp = tuple(sorted(set(expected)))
    disc = tuple(sorted(set(discovered)))
    findings = [
        Finding(Severity.FATAL, "stream_missing", f"expected stream {s} was not found", s) for s in exp if s not in disc
    ]
    findings += [
        Finding(Severity.WARNING, "stream_unexpected", f"stream {s} was found but not expected", s) for s in disc if s not in exp
    ]
    return PreflightReport(exp, disc, tuple(findings))


@dataclass(frozen=True)
class Gap:
    gap_start_auth_s: float
    gap_duration_s: float
    expected_samples_missing: int

    def to_dict(self) -> dict:
        return {
            "gap_start_auth_s": self.gap_start_auth_s,
            "gap_duration_s": self.gap_duration_s,
            "expected_samples_missing": self.expected_samples_missing,
        }


@dataclass(frozen=True)
class GapResult:
    gaps: tuple = ()
    insufficient_data: bool = False

    def to_dict(self) -> dict:
        return {"gaps": [g.to_dict() for g in self.gaps], "insufficient_data": self.insufficient_data}


def detect_gaps(t_auth, nominal_rate_hz: float, k_intervals: float = DEFAULT_K_INTERVALS, span: tuple | None = None) -> GapResult:
    """Flag every inter-sample delta longer than ``k_intervals`` nominal periods.

    A gap starts one nominal period after the last sample before it and lasts
    until one period before the next sample. With ``span`` the stretches before
    the first and after the last sample are checked the same way.
    """
    if k_intervals < 2:
        raise ValueError("k_intervals must be >= 2")
    t = np.ascontiguousarray(t_auth, dtype=np.float64)
    if span is not None:
        # virtual samples one period outside the span make edge losses look like interior gaps
        period = 1.0 / nominal_rate_hz
        t = np.concatenate([[span[0] - period], t, [span[1]]])
    if t.size < 2:
        return GapResult((), True)
    period = 1.0 / nominal_rate_hz
    # slack absorbs rounding in timestamp differences exactly k periods apart
    idx = kernels.gap_indices(t, (k_intervals + 1e-6) * period)
    gaps = []
    for i in idx:
        delta = float(t[i + 1] - t[i])
        gaps.append(Gap(float(t[i]) + period, delta - period, int(round(delta * nominal_rate_hz)) - 1))
    return GapResult(tuple(gaps), False)


@dataclass(frozen=True)
class AudioQC:
    peak_dbfs: float
    rms_dbfs: float
    snr_db: float | None
    clipping_sample_count: int
    flags: tuple = ()

    def to_dict(self) -> dict:
        return {
            "peak_dbfs": json_float(self.peak_dbfs),
            "rms_dbfs": json_float(self.rms_dbfs),
            "snr_db": None if self.snr_db is None else json_float(self.snr_db),
            "clipping_sample_count": self.clipping_sample_count,
            "peak_target_dbfs": PEAK_TARGET_DBFS,
            "flags": list(self.flags),
        }


def json_float(x: float):
    """Non-finite floats become the strings ``-inf``/``inf``/``nan`` in reports."""
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def _db(ratio: float) -> float:
    return 20.0 * math.log10(ratio) if ratio > 0 else -math.inf


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64)))) if x.size else 0.0


def _window(pcm, rate, window, name):
    lo, hi = int(round(window[0] * rate)), int(round(window[1] * rate))
    if not 0 <= lo < hi <= pcm.size:
        raise ValueError(f"{name} window {window} is outside the {pcm.size / rate:.3f} s signal")
    return lo, hi


def audio_metrics(pcm, sample_rate_hz: float, noise_window: tuple | None = None, signal_window: tuple | None = None) -> AudioQC:
    """Peak/RMS level in dBFS, windowed SNR and clipping count for one channel.

    Windows are ``(start_s, end_s)``; SNR is only reported when both are given.
    """
    x = np.asarray(pcm, dtype=np.float64)
    flags = []
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    peak_db = _db(peak)
    rms_db = _db(_rms(x))
    if peak == 0.0:
        flags.append("silent")
    snr = None
    if noise_window is not None and signal_window is not None:
        n0, n1 = _window(x, sample_rate_hz, noise_window, "noise")
        s0, s1 = _window(x, sample_rate_hz, signal_window, "signal")
        if n0 < s1 and s0 < n1:
            raise ValueError("noise and signal windows overlap")
        noise_rms, sig_rms = _rms(x[n0:n1]), _rms(x[s0:s1])
        if noise_rms == 0.0:
            snr = math.inf if sig_rms > 0 else math.nan
            flags.append("zero_noise_floor")
        else:
            snr = _db(sig_rms / noise_rms)
    clipped = int(np.count_nonzero(np.abs(x) >= CLIP_THRESHOLD))
    if clipped:
        flags.append("clipping")
    return AudioQC(peak_db, rms_db, snr, clipped, tuple(flags))


def read_pcm(path, sample_rate_hz: float | None = None):
    """Read normalized mono PCM: 16-bit LE ``.wav`` or raw little-endian float32 (``.f32``/``.raw``).

    Returns ``(samples, rate_hz)``; raw files need ``sample_rate_hz``.
    """
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".wav":
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit mono WAV")
            raw = w.readframes(w.getnframes())
            rate = w.getframerate()
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, float(rate)
    if ext in (".f32", ".raw"):
        if sample_rate_hz is None:
            raise ValueError(f"{path}: raw float32 PCM needs an explicit sample rate")
        data = path.read_bytes()
        if len(data) % 4:
            raise ValueError(f"{path}: length is not a multiple of 4 bytes")
        return np.frombuffer(data, dtype="<f4").astype(np.float64), float(sample_rate_hz)
    raise ValueError(f"{path}: unsupported PCM format {ext!r}")


@dataclass
class Summary:
    status: Status
    findings: list = field(default_factory=list)
    sections: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return self.status.exit_code

    def to_dict(self) -> dict:
        doc = {
            "status": self.status.value,
            "exit_code": self.exit_code,
            "findings": [f.to_dict() for f in self.findings],
        }
        doc.update(self.sections)
        return doc


def _status(findings: Sequence[Finding]) -> Status:
    if any(f.severity is Severity.FATAL for f in findings):
        return Status.FATAL
    return Status.WARNINGS if findings else Status.OK


def session_summary(
    bundle=None,
    timing_report=None,
    gap_report: Mapping[str, GapResult] | None = None,
    preflight_report: PreflightReport | None = None,
    audio_qc: Mapping[str, AudioQC] | None = None,
    max_gap_s: float = DEFAULT_MAX_GAP_S,
) -> Summary:
    """Aggregate every report into one verdict: ok (exit 0), warnings (1) or fatal (2)."""
    findings = []
    sections = {}

    if preflight_report is not None:
        findings.extend(preflight_report.findings)
        sections["preflight"] = preflight_report.to_dict()

    if timing_report is not None:
        for d in timing_report.devices:
            if not d.model.aligned:
                findings.append(Finding(Severity.FATAL, "device_unaligned", f"device {d.device_id} has no usable timing anchors", d.device_id))
            elif not d.passed:
                findings.append(
                    Finding(
                        Severity.FATAL,
                        "timing_tolerance",
                        f"device {d.device_id}: rms residual {d.rms_residual_s:.6f} s exceeds {timing_report.tolerance_s:.6f} s",
                        d.device_id,
                    )
                )
        for dm in timing_report.demotions:
            findings.append(
                Finding(
                    Severity.WARNING,
                    "tier_demotion",
                    f"device {dm['device_id']}: {dm['from_tier']} -> {dm['to_tier']} ({'accepted' if dm.get('accepted') else 'rejected'})",
                    dm["device_id"],
                )
            )
        sections["timing"] = timing_report.to_dict()

    if bundle is not None:
        for sid, reason in sorted(getattr(bundle, "missing", {}).items()):
            code = "stream_unaligned" if reason == "unaligned" else "stream_missing"
            findings.append(Finding(Severity.FATAL, code, f"stream {sid} is {reason}", sid))
        for path in getattr(bundle, "integrity", []):
            findings.append(Finding(Severity.FATAL, "hash_mismatch", f"{path} does not match the manifest", path))

    if gap_report is not None:
        gaps_doc = {}
        for sid in sorted(gap_report):
            res = gap_report[sid]
            gaps_doc[sid] = res.to_dict()
            if res.insufficient_data:
                findings.append(Finding(Severity.WARNING, "insufficient_data", f"stream {sid} has fewer than 2 samples", sid))
            for g in res.gaps:
                sev = Severity.FATAL if g.gap_duration_s > max_gap_s else Severity.WARNING
                findings.append(
                    Finding(
                        sev,
                        "gap",
                        f"stream {sid}: {g.gap_duration_s:.6f} s gap at {g.gap_start_auth_s:.6f} s (~{g.expected_samples_missing} samples)",
                        sid,
                    )
                )
        sections["gaps"] = {"max_gap_s": max_gap_s, "streams": gaps_doc}

    if audio_qc is not None:
        audio_doc = {}
        for sid in sorted(audio_qc):
            a = audio_qc[sid]
            audio_doc[sid] = a.to_dict()
            for flag in a.flags:
                findings.append(Finding(Severity.WARNING, f"audio_{flag}", f"audio channel {sid}: {flag}", sid))
        sections["audio"] = audio_doc

    return Summary(_status(findings), findings, sections)
