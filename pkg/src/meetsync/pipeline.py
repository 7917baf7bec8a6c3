"""Pipeline configuration and the simulate -> align -> package -> qc stages.

Each stage reads what the previous one left on disk, so running the stages
one by one on a root gives the same bytes as :func:`run_end_to_end`.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Mapping

import numpy as np

from . import __version__
from .errors import ConfigurationError, SessionExistsError, UnalignedStreamError
from .packager import (
    ANCHORS_FILE,
    DERIVATIVES,
    FAULT_LOG_FILE,
    MANIFEST,
    SOURCEDATA,
    AlignedStream,
    SessionBundle,
    build_manifest,
    json_bytes,
    read_session,
    render_session,
    stream_completeness,
    write_manifest,
    write_session,
)
from .qc import audio_metrics, detect_gaps, preflight, read_pcm, session_summary
from .scenario import PromptPolicy, Scenario, build_spine, default_scenario, session_span
from .simdev import (
    HOST_DEVICE,
    FaultSpec,
    GroundTruthClock,
    Modality,
    StreamDescriptor,
    calibration_pcm,
    default_streams,
    default_truths,
    derive_seed,
    emit_anchor_pulses,
    frame_log_anchors,
    generate_stream,
    inject_faults,
    marker_stream,
    pulse_schedule,
    read_raw_stream,
    wav_bytes,
)
from .syncfit import FitMethod, AnchorPool, align_stream, fit_session
from .timeline import Tier, TimingReport
from .tsvio import anchors_tsv_bytes, events_tsv_bytes, parse_anchors_tsv, parse_events_tsv

log = logging.getLogger(__name__)

PROVENANCE = "provenance.json"
STREAMS_FILE = "streams.json"
EVENT_LOG_FILE = "host/events_log.tsv"
TRUTH_FILE = "simulation/ground_truth.json"
TRUTH_CHECK = f"{DERIVATIVES}/alignment_truth_check.json"
TIMING_REPORT = f"{DERIVATIVES}/timing_report.json"
QC_REPORT = f"{DERIVATIVES}/qc_report.json"
CALIBRATION_DIR = "audio_calibration"

DEFAULTS = {
    "session_id": "001",
    "scenario": "default",
    "untimed_durations": {"settlement_form": 120.0},
    "gap_between_blocks_s": 0.0,
    "prompt_policy": {},
    "seed": 20260419,
    "devices": [],
    "anchor_cadence_s": 30.0,
    "frame_log_every": 30,
    "faults": {},
    "fit": {
        "method": "theil_sen",
        "min_anchors_full_model": 8,
        "offset_only_fallback": True,
        "tolerance_s": 0.005,
    },
    "qc": {
        "k_intervals": 3,
        "max_gap_s": 5.0,
        "audio_calibration": True,
        "noise_window_s": [0.0, 1.0],
        "signal_window_s": [1.0, 3.0],
    },
    "out": None,
}

_DEVICE_KEYS = {"device_id", "true_offset_s", "true_drift_ppm", "jitter_sigma_s", "tiers"}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigurationError(f"unknown config field {k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, Mapping):
            out[k] = _merge(base[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: Mapping | None = None) -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def override(self, **kw) -> "PipelineConfig":
        d = copy.deepcopy(self.data)
        for key, value in kw.items():
            if value is None:
                continue
            if key == "tolerance_ms":
                d["fit"]["tolerance_s"] = value / 1000.0
            elif key == "method":
                d["fit"]["method"] = value
            else:
                d[key] = value
        return PipelineConfig.from_dict(d)

    def validate(self):
        d = self.data
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            raise ConfigurationError("seed must be an integer")
        if not str(d["session_id"]).isalnum():
            raise ConfigurationError("session_id must be alphanumeric")
        fit = d["fit"]
        if fit["method"] not in ("theil_sen", "least_squares"):
            raise ConfigurationError(f"unknown fit method {fit['method']!r}")
        if not float(fit["tolerance_s"]) > 0:
            raise ConfigurationError("tolerance must be > 0")
        if int(fit["min_anchors_full_model"]) < 2:
            raise ConfigurationError("min_anchors_full_model must be >= 2")
        if not float(d["anchor_cadence_s"]) > 0:
            raise ConfigurationError("anchor_cadence_s must be > 0")
        if int(d["frame_log_every"]) < 1:
            raise ConfigurationError("frame_log_every must be >= 1")
        if int(d["qc"]["k_intervals"]) < 2:
            raise ConfigurationError("qc.k_intervals must be >= 2")
        for dev in d["devices"]:
            if not isinstance(dev, Mapping) or "device_id" not in dev or set(dev) - _DEVICE_KEYS:
                raise ConfigurationError(f"bad device entry {dev!r}")
            for t in dev.get("tiers", []):
                if t not in {x.value for x in Tier if x is not Tier.UNALIGNED}:
                    raise ConfigurationError(f"{dev['device_id']}: unknown tier {t!r}")
        self.scenario()
        self.prompt_policy()
        self.fault_spec()

    # typed views

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def session_id(self) -> str:
        return str(self.data["session_id"])

    def scenario(self) -> Scenario:
        s = self.data["scenario"]
        if s == "default":
            return default_scenario()
        if isinstance(s, Mapping):
            return Scenario.from_dict(s)
        try:
            return Scenario.load(s)
        except OSError as exc:
            raise ConfigurationError(f"cannot read scenario {s}: {exc}") from exc

    def prompt_policy(self) -> PromptPolicy | None:
        p = self.data["prompt_policy"]
        return None if p is None else PromptPolicy.from_dict(p)

    def fault_spec(self) -> FaultSpec:
        return FaultSpec.from_dict(self.data["faults"])

    def fit_method(self) -> FitMethod:
        f = self.data["fit"]
        return FitMethod(f["method"], int(f["min_anchors_full_model"]), bool(f["offset_only_fallback"]), derive_seed(self.seed, "theil_sen"))

    @property
    def tolerance_s(self) -> float:
        return float(self.data["fit"]["tolerance_s"])

    def provenance(self) -> dict:
        # the output root is excluded so identical runs into different roots match
        cfg = {k: v for k, v in self.data.items() if k != "out"}
        canon = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return {
            "tool": "meetsync",
            "tool_version": __version__,
            "seed": self.seed,
            "config_sha256": hashlib.sha256(canon).hexdigest(),
            "config": cfg,
        }


def config_from_root(root, base: PipelineConfig | None = None) -> PipelineConfig:
    if base is not None:
        return base
    path = Path(root) / PROVENANCE
    if not path.is_file():
        raise ConfigurationError(f"{root}: no {PROVENANCE}; pass --config")
    return PipelineConfig.from_dict(json.loads(path.read_text())["config"])


# --- simulate ----------------------------------------------------------------

def _device_setup(cfg: PipelineConfig, streams) -> tuple:
    truths = {t.device_id: t for t in default_truths(streams, cfg.seed)}
    modality_of = {}
    for s in streams:
        modality_of.setdefault(s.device_id, s.modality)
    tiers = {}
    for dev, mod in modality_of.items():
        if dev == HOST_DEVICE:
            tiers[dev] = [Tier.EVENT_LOG.value]
        elif mod is Modality.VIDEO_FRAMES:
            tiers[dev] = [Tier.LSL.value, Tier.FRAME_LOG.value]
        else:
            tiers[dev] = [Tier.LSL.value]
    for over in cfg.data["devices"]:
        dev = over["device_id"]
        if dev not in truths:
            raise ConfigurationError(f"device override names unknown device {dev!r}")
        base = truths[dev].to_dict()
        base.update({k: v for k, v in over.items() if k not in ("tiers",)})
        truths[dev] = GroundTruthClock.from_dict(base)
        if "tiers" in over:
            tiers[dev] = list(over["tiers"])
    return truths, tiers


def simulate(cfg: PipelineConfig, root) -> dict:
    """Write the raw acquisition layer (sourcedata/) and provenance.json under ``root``."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise SessionExistsError(f"{root} is not empty; refusing to overwrite")
    scenario = cfg.scenario()
    events = build_spine(scenario, cfg.data["untimed_durations"], float(cfg.data["gap_between_blocks_s"]), cfg.prompt_policy())
    span = session_span(events)
    descriptors = default_streams()
    truths, tiers = _device_setup(cfg, descriptors)
    log.info("simulating %d streams over %.1f s", len(descriptors), span[1] - span[0])

    streams = {}
    for d in descriptors:
        truth = truths[d.device_id]
        if d.modality is Modality.MARKERS:
            streams[d.stream_id] = marker_stream(d, truth, events)
        else:
            streams[d.stream_id] = generate_stream(d, truth, span, derive_seed(cfg.seed, "waveform", d.stream_id))

    anchors = []
    pulses = pulse_schedule(span, float(cfg.data["anchor_cadence_s"]))
    for tier in (Tier.LSL, Tier.EVENT_LOG, Tier.SIDECAR):
        devs = [truths[k] for k in sorted(truths) if tier.value in tiers[k]]
        if not devs:
            continue
        times = pulses if tier is not Tier.SIDECAR else [span[0], span[1]]
        anchors.extend(emit_anchor_pulses(times, devs, tier))
    every = int(cfg.data["frame_log_every"])
    for d in descriptors:
        if d.modality is Modality.VIDEO_FRAMES and Tier.FRAME_LOG.value in tiers[d.device_id]:
            anchors.extend(frame_log_anchors(streams[d.stream_id], every))

    streams, anchors, fault_log = inject_faults(streams, anchors, cfg.fault_spec(), derive_seed(cfg.seed, "faults"), span)

    files = {
        EVENT_LOG_FILE: events_tsv_bytes(events),
        STREAMS_FILE: json_bytes({"streams": [d.to_dict() for d in descriptors]}),
        ANCHORS_FILE: anchors_tsv_bytes(anchors),
        FAULT_LOG_FILE: json_bytes(fault_log.to_dict()),
        TRUTH_FILE: json_bytes(
            {"devices": [truths[k].to_dict() for k in sorted(truths)], "anchor_tiers": {k: tiers[k] for k in sorted(tiers)}}
        ),
    }
    for sid in sorted(streams):
        s = streams[sid]
        files[f"{s.descriptor.device_id}/{sid}.tsv"] = s.raw_tsv()
        if s.descriptor.modality is Modality.AUDIO_BLOCKS and cfg.data["qc"]["audio_calibration"]:
            pcm = calibration_pcm(derive_seed(cfg.seed, "pcm", sid))
            files[f"{CALIBRATION_DIR}/{sid}.wav"] = wav_bytes(pcm)
    for rel in sorted(files):
        p = root / SOURCEDATA / PurePosixPath(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(files[rel])
    (root / PROVENANCE).write_bytes(json_bytes(cfg.provenance()))
    return files


# --- align -------------------------------------------------------------------

def _source(root: Path, rel: str) -> bytes:
    return (root / SOURCEDATA / PurePosixPath(rel)).read_bytes()


def load_descriptors(root) -> dict:
    doc = json.loads(_source(Path(root), STREAMS_FILE))
    return {d["stream_id"]: StreamDescriptor.from_dict(d) for d in doc["streams"]}


def _write_stage_file(root: Path, rel: str, data: bytes):
    p = root / PurePosixPath(rel)
    if p.exists():
        if p.read_bytes() == data:
            return
        raise SessionExistsError(f"{p} exists with different content; refusing to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(data)


def align(cfg: PipelineConfig, root) -> TimingReport:
    """Fit clock models from the raw anchors and write the timing report."""
    root = Path(root)
    descriptors = load_descriptors(root)
    anchors = parse_anchors_tsv(_source(root, ANCHORS_FILE), root / SOURCEDATA / ANCHORS_FILE)
    pool = AnchorPool(anchors)
    devices = sorted({d.device_id for d in descriptors.values()})
    models, report = fit_session(devices, pool, cfg.fit_method(), cfg.tolerance_s)
    for dev in devices:
        m = models[dev]
        log.info("%s: tier=%s offset=%.6f s drift=%.3f ppm rms=%.6f s", dev, m.source_tier.value, m.offset_s, m.drift_ppm, m.rms_residual_s)
    _write_stage_file(root, TIMING_REPORT, json_bytes(report.to_dict()))

    truth_path = root / SOURCEDATA / PurePosixPath(TRUTH_FILE)
    if truth_path.is_file():
        truth = {d["device_id"]: GroundTruthClock.from_dict(d) for d in json.loads(truth_path.read_bytes())["devices"]}
        _write_stage_file(root, TRUTH_CHECK, json_bytes(truth_check(models, truth)))
    return report


def truth_check(models: Mapping, truths: Mapping) -> dict:
    """Recovered clock models against simulation ground truth."""
    rows = []
    for dev in sorted(models):
        m, t = models[dev], truths.get(dev)
        if t is None:
            continue
        row = {"device_id": dev, "source_tier": m.source_tier.value, "true_offset_s": t.true_offset_s, "true_drift_ppm": t.true_drift_ppm}
        if m.aligned:
            row["offset_error_s"] = m.offset_s - t.true_offset_s
            row["drift_error_ppm"] = m.drift_ppm - t.true_drift_ppm
        else:
            row["offset_error_s"] = None
            row["drift_error_ppm"] = None
        rows.append(row)
    return {"devices": rows}


# --- package -----------------------------------------------------------------

def _sourcedata_files(root: Path) -> dict:
    base = root / SOURCEDATA
    return {p.relative_to(base).as_posix(): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}


def assemble_bundle(cfg: PipelineConfig, root) -> SessionBundle:
    root = Path(root)
    source = _sourcedata_files(root)
    events = parse_events_tsv(source[EVENT_LOG_FILE], root / SOURCEDATA / EVENT_LOG_FILE)
    descriptors = load_descriptors(root)
    report = TimingReport.from_dict(json.loads((root / TIMING_REPORT).read_bytes()))
    models = {d.device_id: d.model for d in report.devices}

    streams, missing = {}, {}
    for sid, desc in sorted(descriptors.items()):
        rel = f"{desc.device_id}/{sid}.tsv"
        if rel not in source:
            missing[sid] = "missing"
            continue
        t_dev, values = read_raw_stream(desc, source[rel], root / SOURCEDATA / rel)
        model = models.get(desc.device_id)
        try:
            if model is None:
                raise UnalignedStreamError(sid, desc.device_id)
            t_auth, order = align_stream(t_dev, model, sid)
        except UnalignedStreamError as exc:
            log.error("%s", exc)
            missing[sid] = "unaligned"
            continue
        if order is not None:
            values = values[order]
        streams[sid] = AlignedStream(desc, t_auth, values)

    extras = {}
    for rel in (PROVENANCE, TRUTH_CHECK):
        p = root / PurePosixPath(rel)
        if p.is_file():
            extras[rel] = p.read_bytes()
    return SessionBundle(
        session_id=cfg.session_id,
        events=events,
        scenario=cfg.scenario(),
        descriptors=descriptors,
        streams=streams,
        anchors=parse_anchors_tsv(source[ANCHORS_FILE]),
        models=models,
        timing_report=report,
        missing=missing,
        sourcedata=source,
        extras=extras,
    )


def package(cfg: PipelineConfig, root):
    root = Path(root)
    bundle = assemble_bundle(cfg, root)
    return write_session(root, bundle, allow_stage_outputs=True)


def reslice(root):
    """Re-derive run slices of a packaged session; existing slice files must match."""
    root = Path(root)
    bundle = read_session(root)
    files, completeness = render_session(bundle)
    for rel, data in sorted(files.items()):
        if rel.startswith(f"{DERIVATIVES}/slices/"):
            _write_stage_file(root, rel, data)
    write_manifest(root, build_manifest(root, completeness))
    return sorted(r for r in files if r.startswith(f"{DERIVATIVES}/slices/"))


# --- qc ----------------------------------------------------------------------

def quality_control(cfg: PipelineConfig, root):
    """Run every check on a packaged session, write qc_report.json, refresh the manifest."""
    root = Path(root)
    bundle = read_session(root)
    expected = sorted(bundle.descriptors)
    discovered = sorted(
        sid for sid, d in bundle.descriptors.items() if f"{d.device_id}/{sid}.tsv" in bundle.sourcedata
    )
    pre = preflight(expected, discovered)

    q = cfg.data["qc"]
    span = session_span(bundle.events)
    gaps = {}
    for sid in sorted(bundle.streams):
        s = bundle.streams[sid]
        if s.descriptor.modality is Modality.MARKERS:
            continue
        gaps[sid] = detect_gaps(s.t_auth, s.descriptor.nominal_rate_hz, int(q["k_intervals"]), span)

    audio = {}
    for rel in sorted(bundle.sourcedata):
        if rel.startswith(CALIBRATION_DIR + "/") and rel.endswith(".wav"):
            pcm, rate = read_pcm(root / SOURCEDATA / PurePosixPath(rel))
            audio[PurePosixPath(rel).stem] = audio_metrics(pcm, rate, tuple(q["noise_window_s"]), tuple(q["signal_window_s"]))

    bundle.qc = None  # a previous qc_report must not feed back into the verdict
    summary = session_summary(bundle, bundle.timing_report, gaps, pre, audio, float(q["max_gap_s"]))
    doc = summary.to_dict()
    doc["stream_completeness"] = stream_completeness(bundle)
    (root / PurePosixPath(QC_REPORT)).write_bytes(json_bytes(doc))
    write_manifest(root, build_manifest(root, stream_completeness(bundle)))
    return summary


def run_end_to_end(cfg: PipelineConfig, root=None):
    root = Path(root if root is not None else cfg.data["out"])
    simulate(cfg, root)
    align(cfg, root)
    package(cfg, root)
    return quality_control(cfg, root)
