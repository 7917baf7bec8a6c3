"""Simulated acquisition devices with known ground-truth clocks.

Every device owns a clock that runs with its own offset, drift and read
jitter relative to the authoritative timeline. Streams, anchor pulses and
injected faults are all derived from seeded generators, so a run is
reproducible bit for bit and recovered alignment can be checked against
the truth.
"""
from __future__ import annotations

import enum
import io
import math
import wave
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError
from .scenario import PARTICIPANTS, EventRecord
from .timeline import PPM, TimeAnchor, Tier
from .tsvio import numeric_table_bytes, parse_numeric_table


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit child seed for ``labels`` under ``master``."""
    key = [zlib.crc32(str(label).encode("utf-8")) for label in labels]
    ss = np.random.SeedSequence(int(master) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


class Modality(str, enum.Enum):
    GAZE = "gaze"
    PHYSIO = "physio"
    VIDEO_FRAMES = "video_frames"
    AUDIO_BLOCKS = "audio_blocks"
    MARKERS = "markers"


@dataclass(frozen=True)
class GroundTruthClock:
    device_id: str
    true_offset_s: float = 0.0
    true_drift_ppm: float = 0.0
    jitter_sigma_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 1.0 + self.true_drift_ppm * PPM > 0:
            raise ConfigurationError(f"{self.device_id}: drift makes the clock run backwards")
        if not self.jitter_sigma_s >= 0:
            raise ConfigurationError(f"{self.device_id}: jitter_sigma_s must be >= 0")

    @property
    def slope(self) -> float:
        return 1.0 + self.true_drift_ppm * PPM

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "true_offset_s": self.true_offset_s,
            "true_drift_ppm": self.true_drift_ppm,
            "jitter_sigma_s": self.jitter_sigma_s,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundTruthClock":
        return cls(
            str(d["device_id"]),
            float(d.get("true_offset_s", 0.0)),
            float(d.get("true_drift_ppm", 0.0)),
            float(d.get("jitter_sigma_s", 0.0)),
            int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class StreamDescriptor:
    stream_id: str
    device_id: str
    participant: str
    modality: Modality
    nominal_rate_hz: float
    channels: tuple

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "channels", tuple(self.channels))
        if not self.nominal_rate_hz > 0:
            raise ConfigurationError(f"{self.stream_id}: nominal_rate_hz must be > 0")
        if not self.channels:
            raise ConfigurationError(f"{self.stream_id}: at least one channel is required")

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "device_id": self.device_id,
            "participant": self.participant,
            "modality": self.modality.value,
            "nominal_rate_hz": self.nominal_rate_hz,
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StreamDescriptor":
        return cls(
            d["stream_id"], d["device_id"], d["participant"], d["modality"], float(d["nominal_rate_hz"]), d["channels"]
        )


@dataclass(frozen=True)
class SampleRecord:
    t_device_s: float
    values: tuple


@dataclass
class SimStream:
    """Samples of one stream, column-wise. ``t_auth_true`` is simulation truth only."""

    descriptor: StreamDescriptor
    t_device: np.ndarray
    values: np.ndarray
    t_auth_true: np.ndarray

    def __len__(self):
        return self.t_device.size

    def records(self) -> list:
        return [SampleRecord(float(t), tuple(map(float, v))) for t, v in zip(self.t_device, self.values)]

    def raw_header(self) -> tuple:
        return ("t_device",) + self.descriptor.channels

    def raw_tsv(self) -> bytes:
        return numeric_table_bytes(self.raw_header(), self.t_device, self.values)


def read_raw_stream(desc: StreamDescriptor, data: bytes, path="<memory>"):
    """Parse a raw per-stream TSV back into ``(t_device, values)``."""
    _, table = parse_numeric_table(data, path, ("t_device",) + desc.channels)
    return table[:, 0].copy(), np.ascontiguousarray(table[:, 1:])


# --- clocks -----------------------------------------------------------------

def device_time(truth: GroundTruthClock, t_auth_s, rng: np.random.Generator | None = None):
    """Device-clock reading at authoritative time ``t_auth_s`` (scalar or array)."""
    t = np.asarray(t_auth_s, dtype=np.float64)
    out = (t - truth.true_offset_s) / truth.slope
    if truth.jitter_sigma_s > 0:
        rng = rng if rng is not None else np.random.default_rng(truth.seed)
        out = out + rng.normal(0.0, truth.jitter_sigma_s, size=out.shape)
    return float(out) if out.ndim == 0 else out


# --- streams ----------------------------------------------------------------

_WAVEFORM = {
    # modality -> (baseline, amplitude, frequency range Hz)
    Modality.GAZE: (0.5, 0.2, (0.05, 0.5)),
    Modality.PHYSIO: (2.0, 0.5, (0.01, 1.2)),
    Modality.AUDIO_BLOCKS: (0.05, 0.03, (0.05, 0.3)),
}


def sample_count(span_auth, rate_hz: float) -> int:
    start, end = span_auth
    return int(math.floor((end - start) * rate_hz + 1e-9))


def generate_stream(
    desc: StreamDescriptor,
    truth: GroundTruthClock,
    span_auth: tuple,
    waveform_seed: int,
) -> SimStream:
    """One sample per ``1/rate`` of authoritative time over ``[start, end)``."""
    start, end = span_auth
    if not end > start:
        raise ConfigurationError(f"{desc.stream_id}: empty span {span_auth}")
    if desc.device_id != truth.device_id:
        raise ConfigurationError(f"{desc.stream_id}: descriptor device {desc.device_id} != clock {truth.device_id}")
    n = sample_count(span_auth, desc.nominal_rate_hz)
    t_auth = start + np.arange(n, dtype=np.float64) / desc.nominal_rate_hz
    t_dev = device_time(truth, t_auth, rng_for(truth.seed, "jitter", desc.stream_id))

    k = len(desc.channels)
    wrng = np.random.default_rng(waveform_seed)
    if desc.modality is Modality.VIDEO_FRAMES:
        values = np.arange(n, dtype=np.float64).reshape(n, 1)
        if k > 1:
            values = np.column_stack([values, np.zeros((n, k - 1))])
    else:
        base, amp, (flo, fhi) = _WAVEFORM.get(desc.modality, (0.0, 1.0, (0.1, 1.0)))
        freqs = wrng.uniform(flo, fhi, k)
        phases = wrng.uniform(0.0, 2 * np.pi, k)
        values = base + amp * np.sin(2 * np.pi * np.outer(t_auth, freqs) + phases)
        values += wrng.normal(0.0, 0.1 * amp, size=(n, k))
        if desc.modality is Modality.AUDIO_BLOCKS:
            values[:, 0] = np.arange(n)
    return SimStream(desc, t_dev, np.ascontiguousarray(values), t_auth)


def marker_stream(desc: StreamDescriptor, truth: GroundTruthClock, events: Sequence[EventRecord]) -> SimStream:
    """Host marker stream: one sample per spine event, value = spine row index."""
    t_auth = np.array([e.onset_s for e in events], dtype=np.float64)
    t_dev = device_time(truth, t_auth, rng_for(truth.seed, "jitter", desc.stream_id))
    values = np.arange(t_auth.size, dtype=np.float64).reshape(-1, 1)
    if len(desc.channels) > 1:
        values = np.column_stack([values, np.zeros((t_auth.size, len(desc.channels) - 1))])
    return SimStream(desc, np.atleast_1d(t_dev), values, t_auth)


def emit_anchor_pulses(pulse_times_auth: Sequence[float], truths: Sequence[GroundTruthClock], tier) -> list:
    """Shared pulses observed on every device clock, one anchor per (pulse, device)."""
    tier = Tier(tier)
    pulses = np.asarray(pulse_times_auth, dtype=np.float64)
    if pulses.size > 1 and np.any(np.diff(pulses) < 0):
        raise ValueError("pulse times must be sorted")
    anchors = []
    for truth in truths:
        t_dev = np.atleast_1d(device_time(truth, pulses, rng_for(truth.seed, "anchor", tier.value)))
        anchors.extend(TimeAnchor(truth.device_id, float(d), float(a), tier) for d, a in zip(t_dev, pulses))
    return anchors


def frame_log_anchors(stream: SimStream, every: int = 30) -> list:
    """Frame-log timing evidence: every ``every``-th frame's device stamp against its capture time."""
    idx = np.arange(0, len(stream), every)
    dev = stream.descriptor.device_id
    return [TimeAnchor(dev, float(stream.t_device[i]), float(stream.t_auth_true[i]), Tier.FRAME_LOG) for i in idx]


def pulse_schedule(span_auth: tuple, cadence_s: float) -> list:
    start, end = span_auth
    if not cadence_s > 0:
        raise ConfigurationError("anchor cadence must be > 0")
    n = int(math.floor((end - start) / cadence_s + 1e-9)) + 1
    return [start + i * cadence_s for i in range(n) if start + i * cadence_s <= end]


# --- faults -----------------------------------------------------------------

@dataclass(frozen=True)
class Dropout:
    stream_id: str
    start_auth_s: float
    duration_s: float

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ConfigurationError(f"dropout on {self.stream_id}: duration must be > 0")


@dataclass(frozen=True)
class AnchorOutliers:
    fraction: float = 0.0
    bias_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigurationError("anchor outlier fraction must be in [0, 1]")


@dataclass(frozen=True)
class FaultSpec:
    dropouts: tuple = ()
    anchor_outliers: AnchorOutliers = AnchorOutliers()
    missing_streams: tuple = ()

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "FaultSpec":
        d = d or {}
        try:
            return cls(
                tuple(Dropout(x["stream_id"], float(x["start_auth_s"]), float(x["duration_s"])) for x in d.get("dropouts", ())),
                AnchorOutliers(**{k: float(v) for k, v in (d.get("anchor_outliers") or {}).items()}),
                tuple(d.get("missing_streams", ())),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed fault spec: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "dropouts": [
                {"stream_id": x.stream_id, "start_auth_s": x.start_auth_s, "duration_s": x.duration_s} for x in self.dropouts
            ],
            "anchor_outliers": {"fraction": self.anchor_outliers.fraction, "bias_s": self.anchor_outliers.bias_s},
            "missing_streams": list(self.missing_streams),
        }


@dataclass
class FaultLog:
    dropouts: list = field(default_factory=list)
    anchor_outliers: list = field(default_factory=list)
    missing_streams: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dropouts": list(self.dropouts),
            "anchor_outliers": list(self.anchor_outliers),
            "missing_streams": list(self.missing_streams),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FaultLog":
        return cls(list(d.get("dropouts", [])), list(d.get("anchor_outliers", [])), list(d.get("missing_streams", [])))


def inject_faults(
    streams: Mapping[str, SimStream],
    anchors: Sequence[TimeAnchor],
    spec: FaultSpec,
    seed: int,
    session_span: tuple | None = None,
):
    """Apply dropouts, anchor outliers and missing streams; returns ``(streams, anchors, log)``.

    Inputs are not modified.
    """
    log = FaultLog()
    out = dict(streams)
    for d in spec.dropouts:
        if session_span is not None:
            lo, hi = session_span
            if d.start_auth_s < lo or d.start_auth_s + d.duration_s > hi:
                raise ConfigurationError(
                    f"dropout on {d.stream_id} [{d.start_auth_s}, {d.start_auth_s + d.duration_s}) is outside the session span"
                )
        if d.stream_id not in out:
            raise ConfigurationError(f"dropout names unknown stream {d.stream_id!r}")
        s = out[d.stream_id]
        end = d.start_auth_s + d.duration_s
        drop = (s.t_auth_true >= d.start_auth_s) & (s.t_auth_true < end)
        keep = ~drop
        out[d.stream_id] = SimStream(s.descriptor, s.t_device[keep], s.values[keep], s.t_auth_true[keep])
        log.dropouts.append(
            {
                "stream_id": d.stream_id,
                "start_auth_s": d.start_auth_s,
                "duration_s": d.duration_s,
                "samples_removed": int(drop.sum()),
            }
        )

    for sid in spec.missing_streams:
        if sid not in out:
            raise ConfigurationError(f"missing_streams names unknown stream {sid!r}")
        del out[sid]
        log.missing_streams.append(sid)

    new_anchors = list(anchors)
    frac = spec.anchor_outliers.fraction
    if frac > 0:
        groups: dict = {}
        for i, a in enumerate(anchors):
            groups.setdefault((a.device_id, a.tier.value), []).append(i)
        for (dev, tier), idx in sorted(groups.items()):
            count = int(math.floor(frac * len(idx) + 0.5))
            if count == 0:
                continue
            chosen = np.sort(rng_for(seed, "outliers", dev, tier).choice(len(idx), size=count, replace=False))
            for c in chosen:
                i = idx[int(c)]
                a = anchors[i]
                new_anchors[i] = TimeAnchor(a.device_id, a.t_device_s + spec.anchor_outliers.bias_s, a.t_auth_s, a.tier, a.weight)
                log.anchor_outliers.append(
                    {"device_id": dev, "tier": tier, "t_auth_s": a.t_auth_s, "bias_s": spec.anchor_outliers.bias_s}
                )
    return out, new_anchors, log


# --- default rig ------------------------------------------------------------

VIDEO_RATE_HZ = 30.0
GAZE_RATE_HZ = 100.0
PHYSIO_RATE_HZ = 25.0
AUDIO_BLOCK_RATE_HZ = 48000 / 1024
MARKER_RATE_HZ = 1.0
HOST_DEVICE = "host"
ROOM = "room"

GAZE_CHANNELS = ("gaze_x", "gaze_y", "pupil_mm")
PHYSIO_CHANNELS = ("eda_us", "ppg", "skin_temp_c")
VIDEO_CHANNELS = ("frame_index",)
AUDIO_CHANNELS = ("block_index", "block_rms")
MARKER_CHANNELS = ("spine_row",)


def default_streams() -> list:
    """The simulated rig: per-participant eye trackers, wearables, desk cameras and
    close-talk mics, plus three overview cameras, a room mic and the host marker stream."""
    s = []
    for p in PARTICIPANTS:
        s.append(StreamDescriptor(f"gaze_{p}", f"tobii_{p}", p, Modality.GAZE, GAZE_RATE_HZ, GAZE_CHANNELS))
        s.append(StreamDescriptor(f"physio_{p}", f"emotibit_{p}", p, Modality.PHYSIO, PHYSIO_RATE_HZ, PHYSIO_CHANNELS))
        s.append(StreamDescriptor(f"video_{p}", f"cam_{p}", p, Modality.VIDEO_FRAMES, VIDEO_RATE_HZ, VIDEO_CHANNELS))
        s.append(StreamDescriptor(f"audio_{p}", "audio_interface", p, Modality.AUDIO_BLOCKS, AUDIO_BLOCK_RATE_HZ, AUDIO_CHANNELS))
    for k in (1, 2, 3):
        s.append(StreamDescriptor(f"video_room{k}", f"cam_room{k}", ROOM, Modality.VIDEO_FRAMES, VIDEO_RATE_HZ, VIDEO_CHANNELS))
    s.append(StreamDescriptor("audio_room", "audio_interface", ROOM, Modality.AUDIO_BLOCKS, AUDIO_BLOCK_RATE_HZ, AUDIO_CHANNELS))
    s.append(StreamDescriptor("markers", HOST_DEVICE, ROOM, Modality.MARKERS, MARKER_RATE_HZ, MARKER_CHANNELS))
    return sorted(s, key=lambda d: d.stream_id)


def default_truths(streams: Sequence[StreamDescriptor], master_seed: int) -> list:
    """Seeded device clocks; the host is the authoritative clock and stays exact."""
    jitter = {
        Modality.GAZE: 0.0005,
        Modality.PHYSIO: 0.0005,
        Modality.VIDEO_FRAMES: 0.002,
        Modality.AUDIO_BLOCKS: 0.0002,
    }
    devices = {}
    for d in streams:
        devices.setdefault(d.device_id, d.modality)
    truths = []
    for dev, modality in sorted(devices.items()):
        seed = derive_seed(master_seed, "device", dev)
        if dev == HOST_DEVICE:
            truths.append(GroundTruthClock(dev, 0.0, 0.0, 0.0, seed))
            continue
        r = rng_for(master_seed, "truth", dev)
        truths.append(GroundTruthClock(dev, float(r.uniform(-1, 1)), float(r.uniform(-100, 100)), jitter[modality], seed))
    return truths


# --- calibration PCM ----------------------------------------------------------

PCM_RATE_HZ = 48000


def calibration_pcm(seed: int, noise_s: float = 1.0, signal_s: float = 2.0, peak_dbfs: float = -12.0,
                    noise_rms: float = 1e-3, rate_hz: int = PCM_RATE_HZ) -> np.ndarray:
    """Bench-test recording: a noise-floor segment then gray-ish noise peaking at ``peak_dbfs``."""
    rng = np.random.default_rng(seed)
    floor = rng.normal(0.0, noise_rms, int(noise_s * rate_hz) + int(signal_s * rate_hz))
    sig = rng.normal(0.0, 1.0, int(signal_s * rate_hz))
    sig *= 10 ** (peak_dbfs / 20) / np.max(np.abs(sig))
    floor[int(noise_s * rate_hz):] += sig
    return np.clip(floor, -1.0, 1.0)


def wav_bytes(pcm: np.ndarray, rate_hz: int = PCM_RATE_HZ) -> bytes:
    """16-bit little-endian mono WAV."""
    ints = np.clip(np.round(pcm * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate_hz)
        w.writeframes(ints.tobytes())
    return buf.getvalue()
