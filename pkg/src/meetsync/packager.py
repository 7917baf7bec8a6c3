"""BIDS-oriented session tree: writing, reading, slicing and manifest verification.

Layout (session-rooted; one group session spans four participants)::

    dataset_description.json
    manifest.json
    ses-<S>_events.tsv                 authoritative event spine
    ses-<S>_scenario.json              protocol definition used for the run
    ses-<S>_streams.json               every expected stream and its status
    sub-<P>/<modality>/sub-<P>_<modality>_<stream>.tsv (+ .json sidecar)
    room/<modality>/room_<modality>_<stream>.tsv (+ .json sidecar)
    sourcedata/                        raw device-clock files, never rewritten
    derivatives/timing_report.json, qc_report.json, participant_mapping.tsv,
    derivatives/slices/
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath
from typing import Mapping

import numpy as np

from . import __version__, kernels
from .errors import NotASessionError, SessionExistsError, StructuralError
from .qc import detect_gaps
from .scenario import NA, Scenario, block_windows, session_span
from .simdev import FaultLog, Modality, StreamDescriptor
from .timeline import ClockModel, TimingReport
from .tsvio import (
    anchors_tsv_bytes,
    events_tsv_bytes,
    numeric_table_bytes,
    parse_anchors_tsv,
    parse_events_tsv,
    parse_numeric_table,
    string_table_bytes,
)

TOOL = f"meetsync {__version__}"
MANIFEST = "manifest.json"
SOURCEDATA = "sourcedata"
DERIVATIVES = "derivatives"
ANCHORS_FILE = "anchors.tsv"
FAULT_LOG_FILE = "fault_log.json"
MAPPING_COLUMNS = ("participant", "stream_id", "device_id", "modality")
RANGE_COLUMNS = ("stream_id", "start_index", "stop_index", "n_samples")
WINDOW_COLUMNS = ("task_id", "start_auth_s", "end_auth_s")
# stage outputs that a later stage may find already in place
STAGE_ENTRIES = ("sourcedata", "derivatives", "provenance.json")


def json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class AlignedStream:
    descriptor: StreamDescriptor
    t_auth: np.ndarray
    values: np.ndarray

    def __len__(self):
        return self.t_auth.size


@dataclass
class SessionBundle:
    session_id: str
    events: list
    scenario: Scenario | None = None
    descriptors: dict = field(default_factory=dict)  # stream_id -> StreamDescriptor, expected streams
    streams: dict = field(default_factory=dict)  # stream_id -> AlignedStream
    anchors: list = field(default_factory=list)
    models: dict = field(default_factory=dict)  # device_id -> ClockModel
    timing_report: TimingReport | None = None
    fault_log: FaultLog | None = None
    qc: dict | None = None
    missing: dict = field(default_factory=dict)  # stream_id -> "missing" | "unaligned"
    sourcedata: dict = field(default_factory=dict)  # path under sourcedata/ -> bytes
    extras: dict = field(default_factory=dict)  # other root-relative path -> bytes, copied verbatim
    integrity: list = field(default_factory=list)  # filled by read_session

    def all_descriptors(self) -> dict:
        out = dict(self.descriptors)
        for sid, s in self.streams.items():
            out.setdefault(sid, s.descriptor)
        return out


@dataclass(frozen=True)
class ManifestEntry:
    relative_path: str
    byte_size: int
    sha256_hex: str


@dataclass
class SessionManifest:
    entries: list
    stream_completeness: dict
    created_with: str = TOOL

    def to_dict(self) -> dict:
        return {
            "created_with": self.created_with,
            "entries": [
                {"relative_path": e.relative_path, "byte_size": e.byte_size, "sha256_hex": e.sha256_hex} for e in self.entries
            ],
            "stream_completeness": dict(sorted(self.stream_completeness.items())),
        }

    @classmethod
    def from_dict(cls, d) -> "SessionManifest":
        return cls(
            [ManifestEntry(e["relative_path"], int(e["byte_size"]), e["sha256_hex"]) for e in d["entries"]],
            dict(d.get("stream_completeness", {})),
            d.get("created_with", ""),
        )

    def hashes(self) -> dict:
        return {e.relative_path: e.sha256_hex for e in self.entries}


@dataclass(frozen=True)
class RunSlice:
    task_id: str
    window: tuple
    ranges: dict  # stream_id -> (start_index, stop_index)


# --- paths -------------------------------------------------------------------

def stream_relpath(desc: StreamDescriptor) -> str:
    mod = desc.modality.value
    if desc.participant in ("room", "", None):
        return f"room/{mod}/room_{mod}_{desc.stream_id}.tsv"
    return f"sub-{desc.participant}/{mod}/sub-{desc.participant}_{mod}_{desc.stream_id}.tsv"


def events_relpath(session_id: str) -> str:
    return f"ses-{session_id}_events.tsv"


# --- rendering -----------------------------------------------------------------

def dataset_description(session_id: str) -> dict:
    return {
        "Name": f"meetsync session {session_id}",
        "BIDSVersion": "1.9.0",
        "DatasetType": "raw",
        "GeneratedBy": [{"Name": "meetsync", "Version": __version__}],
        "SessionLayout": "session-rooted: one group session holds all participants; sub-<P> folders sit below the session root",
        "Timebase": {
            "authoritative_clock": "protocol event host clock (identity clock model)",
            "origin": "session_start event",
            "units": "s",
            "number_format": "fixed-point, 6 decimals",
        },
        "LocalConventions": {
            "missing_value": NA,
            "stream_sidecar_fields": ["clock_model", "columns", "descriptor", "sample_count", "source_tier"],
            "gaze": "local sidecar informed by the draft BIDS eye-tracking extension (BEP020)",
            "motion": "local sidecar informed by the draft BIDS motion extension (BEP029)",
            "sourcedata": "device-clock raw files as emitted by the acquisition layer; never rewritten",
        },
    }


def _stream_sidecar(stream: AlignedStream, model: ClockModel | None) -> dict:
    d = stream.descriptor
    return {
        "descriptor": d.to_dict(),
        "clock_model": model.to_dict() if model is not None else None,
        "source_tier": model.source_tier.value if model is not None else None,
        "columns": ["t_auth"] + list(d.channels),
        "sample_count": len(stream),
    }


def _quantized_times(bundle: SessionBundle) -> dict:
    return {sid: kernels.quantize(np.ascontiguousarray(s.t_auth, dtype=np.float64)) for sid, s in bundle.streams.items()}


def stream_completeness(bundle: SessionBundle, k_intervals: float = 3, times: dict | None = None) -> dict:
    """``present`` / ``partial`` (gaps inside the session span) / ``missing`` per expected stream."""
    times = times if times is not None else _quantized_times(bundle)
    span = session_span(bundle.events) if bundle.events else None
    out = {}
    for sid, desc in sorted(bundle.all_descriptors().items()):
        if sid in bundle.missing or sid not in bundle.streams:
            out[sid] = "missing"
        elif desc.modality is Modality.MARKERS:
            out[sid] = "present"
        else:
            res = detect_gaps(times[sid], desc.nominal_rate_hz, k_intervals, span)
            out[sid] = "partial" if (res.gaps or res.insufficient_data) else "present"
    return out


def slice_runs(bundle: SessionBundle, times: dict | None = None) -> list:
    """One run window per task, ``[block_start, block_end)``, with per-stream sample ranges."""
    times = times if times is not None else _quantized_times(bundle)
    windows = block_windows(bundle.events)
    tasks = [b.task_id for b in bundle.scenario.blocks] if bundle.scenario else sorted(
        {e.task for e in bundle.events if e.event_type in ("block_start", "block_end") and e.task}
    )
    if not tasks:
        raise StructuralError("event spine has no block boundary events")
    slices = []
    for task in tasks:
        if task not in windows:
            raise StructuralError(f"task {task}: missing block_start/block_end event")
        start, end = windows[task]
        ranges = {}
        for sid in sorted(times):
            t = times[sid]
            lo = int(np.searchsorted(t, start, side="left"))
            hi = int(np.searchsorted(t, end, side="left"))
            ranges[sid] = (lo, hi)
        slices.append(RunSlice(task, (start, end), ranges))
    return slices


def slice_files(bundle: SessionBundle, slices) -> dict:
    files = {}
    sid = bundle.session_id
    files[f"{DERIVATIVES}/slices/run_windows.tsv"] = string_table_bytes(
        WINDOW_COLUMNS, [(s.task_id, float(s.window[0]), float(s.window[1])) for s in slices]
    )
    for s in slices:
        start, end = s.window
        rows = [
            e for e in bundle.events
            if start <= e.onset_s < end and e.task in (None, s.task_id)
        ]
        rebased = [_rebase(e, start) for e in rows]
        base = f"{DERIVATIVES}/slices/task-{s.task_id}/ses-{sid}_task-{s.task_id}"
        files[f"{base}_events.tsv"] = events_tsv_bytes(rebased)
        files[f"{base}_ranges.tsv"] = string_table_bytes(
            RANGE_COLUMNS, [(k, str(lo), str(hi), str(hi - lo)) for k, (lo, hi) in sorted(s.ranges.items())]
        )
    return files


def _rebase(e, start):
    return replace(e, onset_s=e.onset_s - start)


def participant_mapping_bytes(bundle: SessionBundle) -> bytes:
    rows = []
    for sid, d in sorted(bundle.all_descriptors().items()):
        if not d.participant:
            raise StructuralError(f"stream {sid} has no participant label")
        rows.append((d.participant, sid, d.device_id, d.modality.value))
    return string_table_bytes(MAPPING_COLUMNS, rows)


def write_participant_mapping(bundle: SessionBundle, root=None) -> bytes:
    """Render ``participant, stream_id, device_id, modality`` rows; write them under ``root`` if given."""
    data = participant_mapping_bytes(bundle)
    if root is not None:
        path = Path(root) / DERIVATIVES / "participant_mapping.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    return data


def render_session(bundle: SessionBundle) -> tuple:
    """Every file of the session tree as ``{relpath: bytes}`` plus stream completeness."""
    files = {}
    sid = bundle.session_id
    files["dataset_description.json"] = json_bytes(dataset_description(sid))
    files[events_relpath(sid)] = events_tsv_bytes(bundle.events)
    if bundle.scenario is not None:
        files[f"ses-{sid}_scenario.json"] = bundle.scenario.to_json().encode("utf-8")

    descriptors = bundle.all_descriptors()
    if descriptors:
        files[f"ses-{sid}_streams.json"] = json_bytes(
            {
                "streams": [descriptors[k].to_dict() for k in sorted(descriptors)],
                "missing": dict(sorted(bundle.missing.items())),
            }
        )
        files[f"{DERIVATIVES}/participant_mapping.tsv"] = participant_mapping_bytes(bundle)

    for stream_id in sorted(bundle.streams):
        s = bundle.streams[stream_id]
        rel = stream_relpath(s.descriptor)
        files[rel] = numeric_table_bytes(("t_auth",) + s.descriptor.channels, s.t_auth, s.values)
        files[rel[:-4] + ".json"] = json_bytes(_stream_sidecar(s, bundle.models.get(s.descriptor.device_id)))

    source = dict(bundle.sourcedata)
    if bundle.anchors and ANCHORS_FILE not in source:
        source[ANCHORS_FILE] = anchors_tsv_bytes(bundle.anchors)
    if bundle.fault_log is not None and FAULT_LOG_FILE not in source:
        source[FAULT_LOG_FILE] = json_bytes(bundle.fault_log.to_dict())
    for rel, data in source.items():
        files[f"{SOURCEDATA}/{rel}"] = data

    if bundle.timing_report is not None:
        files[f"{DERIVATIVES}/timing_report.json"] = json_bytes(bundle.timing_report.to_dict())
    if bundle.qc is not None:
        files[f"{DERIVATIVES}/qc_report.json"] = json_bytes(bundle.qc)

    times = _quantized_times(bundle)
    if any(e.event_type == "block_start" for e in bundle.events):
        files.update(slice_files(bundle, slice_runs(bundle, times)))
    files.update(bundle.extras)
    files.pop(MANIFEST, None)
    return files, stream_completeness(bundle, times=times)


def _existing_files(root: Path) -> dict:
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = Path(dirpath) / n
            out[p.relative_to(root).as_posix()] = p
    return out


def build_manifest(root, completeness: Mapping) -> SessionManifest:
    root = Path(root)
    entries = []
    for rel, p in sorted(_existing_files(root).items()):
        if rel == MANIFEST:
            continue
        data = p.read_bytes()
        entries.append(ManifestEntry(rel, len(data), sha256_hex(data)))
    return SessionManifest(entries, dict(completeness))


def write_manifest(root, manifest: SessionManifest):
    Path(root, MANIFEST).write_bytes(json_bytes(manifest.to_dict()))


def write_session(root, bundle: SessionBundle, allow_stage_outputs: bool = False) -> SessionManifest:
    """Write the session tree under ``root`` and return its manifest.

    ``root`` must be absent or empty. With ``allow_stage_outputs`` the files a
    previous pipeline stage left under ``sourcedata/``, ``derivatives/`` or
    ``provenance.json`` are accepted as long as this bundle would write the
    very same bytes; they are not touched.
    """
    root = Path(root)
    files, completeness = render_session(bundle)
    existing = _existing_files(root) if root.exists() else {}
    if existing:
        if not allow_stage_outputs:
            raise SessionExistsError(f"{root} is not empty; refusing to overwrite")
        for rel, p in existing.items():
            if rel.split("/")[0] not in STAGE_ENTRIES or rel not in files or p.read_bytes() != files[rel]:
                raise SessionExistsError(f"{root}: existing file {rel} would be overwritten")
    for rel in sorted(files):
        if rel in existing:
            continue
        p = root / PurePosixPath(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(files[rel])
    manifest = build_manifest(root, completeness)
    write_manifest(root, manifest)
    return manifest


# --- reading ---------------------------------------------------------------------

def load_manifest(root) -> SessionManifest:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise NotASessionError(f"{root}: no {MANIFEST}")
    try:
        return SessionManifest.from_dict(json.loads(path.read_bytes()))
    except (ValueError, KeyError) as exc:
        raise NotASessionError(f"{path}: unreadable manifest ({exc})") from exc


@dataclass(frozen=True)
class VerifyResult:
    mismatched: tuple
    missing: tuple
    unlisted: tuple

    @property
    def ok(self) -> bool:
        return not (self.mismatched or self.missing)

    def problems(self) -> list:
        return [f"hash mismatch: {p}" for p in self.mismatched] + [f"missing file: {p}" for p in self.missing]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "mismatched": list(self.mismatched), "missing": list(self.missing), "unlisted": list(self.unlisted)}


def verify_session(root) -> VerifyResult:
    """Recompute every manifest hash."""
    root = Path(root)
    manifest = load_manifest(root)
    present = _existing_files(root)
    mismatched, missing = [], []
    for e in manifest.entries:
        p = present.get(e.relative_path)
        if p is None:
            missing.append(e.relative_path)
        elif sha256_hex(p.read_bytes()) != e.sha256_hex:
            mismatched.append(e.relative_path)
    listed = {e.relative_path for e in manifest.entries} | {MANIFEST}
    unlisted = sorted(set(present) - listed)
    return VerifyResult(tuple(mismatched), tuple(missing), tuple(unlisted))


def _is_canonical(rel: str, session_id: str) -> bool:
    top = rel.split("/")[0]
    if rel in ("dataset_description.json", events_relpath(session_id), f"ses-{session_id}_scenario.json", f"ses-{session_id}_streams.json"):
        return True
    if top == SOURCEDATA or top == "room" or top.startswith("sub-"):
        return True
    return rel in (
        f"{DERIVATIVES}/timing_report.json",
        f"{DERIVATIVES}/qc_report.json",
        f"{DERIVATIVES}/participant_mapping.tsv",
    ) or rel.startswith(f"{DERIVATIVES}/slices/")


def read_session(root) -> SessionBundle:
    """Parse a session tree. Hash mismatches are collected in ``bundle.integrity``."""
    root = Path(root)
    manifest = load_manifest(root)
    verdict = verify_session(root)
    paths = [e.relative_path for e in manifest.entries if e.relative_path not in verdict.missing]

    events_files = [p for p in paths if "/" not in p and p.startswith("ses-") and p.endswith("_events.tsv")]
    if len(events_files) != 1:
        raise NotASessionError(f"{root}: expected one session events.tsv, found {events_files}")
    session_id = events_files[0][len("ses-"):-len("_events.tsv")]

    def raw(rel):
        return (root / PurePosixPath(rel)).read_bytes()

    events = parse_events_tsv(raw(events_files[0]), root / events_files[0])
    bundle = SessionBundle(session_id, events)
    bundle.integrity = list(verdict.mismatched) + list(verdict.missing)

    pset = set(paths)
    if f"ses-{session_id}_scenario.json" in pset:
        bundle.scenario = Scenario.from_dict(json.loads(raw(f"ses-{session_id}_scenario.json")))
    if f"ses-{session_id}_streams.json" in pset:
        doc = json.loads(raw(f"ses-{session_id}_streams.json"))
        bundle.descriptors = {d["stream_id"]: StreamDescriptor.from_dict(d) for d in doc["streams"]}
        bundle.missing = dict(doc.get("missing", {}))

    for rel in paths:
        top = rel.split("/")[0]
        if not (top == "room" or top.startswith("sub-")) or not rel.endswith(".json"):
            continue
        side = json.loads(raw(rel))
        desc = StreamDescriptor.from_dict(side["descriptor"])
        data_rel = rel[:-5] + ".tsv"
        if data_rel not in pset:
            raise StructuralError(f"{rel}: sidecar without data file")
        _, table = parse_numeric_table(raw(data_rel), root / data_rel, ["t_auth", *desc.channels])
        bundle.streams[desc.stream_id] = AlignedStream(desc, table[:, 0].copy(), np.ascontiguousarray(table[:, 1:]))
        if side.get("clock_model"):
            m = ClockModel.from_dict(side["clock_model"])
            bundle.models[m.device_id] = m

    for rel in paths:
        if rel.startswith(SOURCEDATA + "/"):
            bundle.sourcedata[rel[len(SOURCEDATA) + 1:]] = raw(rel)
    if ANCHORS_FILE in bundle.sourcedata:
        bundle.anchors = parse_anchors_tsv(bundle.sourcedata[ANCHORS_FILE], root / SOURCEDATA / ANCHORS_FILE)
    if FAULT_LOG_FILE in bundle.sourcedata:
        bundle.fault_log = FaultLog.from_dict(json.loads(bundle.sourcedata[FAULT_LOG_FILE]))

    if f"{DERIVATIVES}/timing_report.json" in pset:
        bundle.timing_report = TimingReport.from_dict(json.loads(raw(f"{DERIVATIVES}/timing_report.json")))
        for d in bundle.timing_report.devices:
            bundle.models.setdefault(d.device_id, d.model)
    if f"{DERIVATIVES}/qc_report.json" in pset:
        bundle.qc = json.loads(raw(f"{DERIVATIVES}/qc_report.json"))

    for rel in paths:
        if not _is_canonical(rel, session_id):
            bundle.extras[rel] = raw(rel)
    return bundle
