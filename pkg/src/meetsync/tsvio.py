"""Strict TSV reading and writing for the session file formats.

Numbers are written fixed-point with six decimals, absent values as
``n/a``, tab separated, ``\\n`` line endings. Readers reject anything else
and report the offending file and 1-based line number.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import TSVParseError
from .scenario import NA, SPINE_COLUMNS, EventRecord
from .timeline import TimeAnchor, Tier

DECIMALS = 6
ANCHOR_COLUMNS = ("device_id", "t_device_s", "t_auth_s", "tier", "weight")


def fmt_num(x: float) -> str:
    return f"{x:.{DECIMALS}f}"


def fmt_opt(x) -> str:
    if x is None:
        return NA
    if isinstance(x, float):
        return fmt_num(x)
    return str(x)


def numeric_table_bytes(header: Sequence[str], t: np.ndarray, values: np.ndarray) -> bytes:
    t = np.ascontiguousarray(t, dtype=np.float64)
    values = np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(t.size, -1))
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(values))):
        raise ValueError("numeric tables hold finite values only")
    head = ("\t".join(header) + "\n").encode("utf-8")
    return head + kernels.format_table(t, values, DECIMALS)


def parse_numeric_table(data: bytes, path="<memory>", expect_header: Sequence[str] | None = None):
    """Parse a header line plus all-numeric rows; returns ``(header, array)``."""
    nl = data.find(b"\n")
    if nl < 0:
        raise TSVParseError(path, 1, "missing header line")
    header = tuple(data[:nl].decode("utf-8").split("\t"))
    if expect_header is not None and header != tuple(expect_header):
        raise TSVParseError(path, 1, f"unexpected header {header!r}, expected {tuple(expect_header)!r}")
    table = kernels.parse_table(data[nl + 1:], len(header), str(path), 2)
    return header, table


def _split_rows(data: bytes, path, columns: Sequence[str]):
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TSVParseError(path, text_line(data, exc.start), "not valid UTF-8") from None
    if not text:
        raise TSVParseError(path, 1, "missing header line")
    if not text.endswith("\n"):
        raise TSVParseError(path, text.count("\n") + 1, "missing trailing newline")
    lines = text[:-1].split("\n")
    if tuple(lines[0].split("\t")) != tuple(columns):
        raise TSVParseError(path, 1, f"unexpected header {lines[0]!r}")
    for i, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(columns):
            raise TSVParseError(path, i, f"expected {len(columns)} fields, got {len(fields)}")
        yield i, fields


def text_line(data: bytes, offset: int) -> int:
    return data.count(b"\n", 0, offset) + 1


def _num(field: str, path, line: int, name: str, optional: bool = False):
    if optional and field == NA:
        return None
    try:
        v = float(field)
    except ValueError:
        raise TSVParseError(path, line, f"{name}: invalid number {field!r}") from None
    if not math.isfinite(v) or field.strip() != field:
        raise TSVParseError(path, line, f"{name}: invalid number {field!r}")
    return v


def _str(field: str):
    return None if field == NA else field


def events_tsv_bytes(events: Sequence[EventRecord]) -> bytes:
    out = ["\t".join(SPINE_COLUMNS)]
    for e in events:
        out.append(
            "\t".join(
                (
                    fmt_num(e.onset_s),
                    fmt_opt(e.duration_s),
                    fmt_opt(e.task),
                    fmt_opt(e.phase),
                    fmt_opt(e.participant),
                    fmt_opt(e.stream),
                    e.event_type,
                    fmt_opt(e.value),
                )
            )
        )
    return ("\n".join(out) + "\n").encode("utf-8")


def parse_events_tsv(data: bytes, path="<memory>") -> list:
    events = []
    for line, f in _split_rows(data, path, SPINE_COLUMNS):
        onset = _num(f[0], path, line, "onset")
        duration = _num(f[1], path, line, "duration", optional=True)
        if onset < 0 or (duration is not None and duration < 0):
            raise TSVParseError(path, line, "negative onset or duration")
        if f[6] in ("", NA):
            raise TSVParseError(path, line, "event_type is required")
        events.append(
            EventRecord(onset, f[6], duration, _str(f[2]), _str(f[3]), _str(f[4]), _str(f[5]), _str(f[7]))
        )
    return events


def anchors_tsv_bytes(anchors: Sequence[TimeAnchor]) -> bytes:
    out = ["\t".join(ANCHOR_COLUMNS)]
    for a in anchors:
        out.append(f"{a.device_id}\t{fmt_num(a.t_device_s)}\t{fmt_num(a.t_auth_s)}\t{a.tier.value}\t{fmt_num(a.weight)}")
    return ("\n".join(out) + "\n").encode("utf-8")


def parse_anchors_tsv(data: bytes, path="<memory>") -> list:
    anchors = []
    tiers = {t.value for t in Tier if t is not Tier.UNALIGNED}
    for line, f in _split_rows(data, path, ANCHOR_COLUMNS):
        if f[3] not in tiers:
            raise TSVParseError(path, line, f"unknown tier {f[3]!r}")
        w = _num(f[4], path, line, "weight")
        if w < 0:
            raise TSVParseError(path, line, "negative weight")
        anchors.append(
            TimeAnchor(f[0], _num(f[1], path, line, "t_device_s"), _num(f[2], path, line, "t_auth_s"), Tier(f[3]), w)
        )
    return anchors


def string_table_bytes(columns: Sequence[str], rows: Sequence[Sequence]) -> bytes:
    out = ["\t".join(columns)]
    out.extend("\t".join(fmt_opt(v) for v in row) for row in rows)
    return ("\n".join(out) + "\n").encode("utf-8")


def parse_string_table(data: bytes, columns: Sequence[str], path="<memory>") -> list:
    return [tuple(f) for _, f in _split_rows(data, path, columns)]


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()
