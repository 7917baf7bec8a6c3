"""numpy implementations of the hot loops, used when the extension is absent."""
from __future__ import annotations

import numpy as np

from .errors import TSVParseError

BACKEND = "python"

_NUMCHARS = b"0123456789.+-eE"
_ROW_CHUNK = 20000


def pairwise_slopes(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 2:
        return np.empty(0)
    ii, jj = np.triu_indices(n, k=1)
    return pair_slopes(x, y, ii, jj)


def pair_slopes(x, y, ii, jj):
    dx = x[jj] - x[ii]
    keep = dx != 0.0
    return (y[jj][keep] - y[ii][keep]) / dx[keep]


def gap_indices(t, threshold):
    t = np.asarray(t, dtype=np.float64)
    if t.size < 2:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(np.diff(t) > threshold).astype(np.int64)


def format_table(t, values, decimals=6):
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return b""
    values = np.asarray(values, dtype=np.float64).reshape(t.size, -1)
    k = values.shape[1]
    cell = f"%.{decimals}f"
    row_fmt = "\t".join([cell] * (k + 1)) + "\n"
    table = np.column_stack([t, values]) if k else t.reshape(-1, 1)
    parts = []
    for lo in range(0, t.size, _ROW_CHUNK):
        chunk = table[lo:lo + _ROW_CHUNK]
        parts.append((row_fmt * chunk.shape[0]) % tuple(chunk.ravel().tolist()))
    return "".join(parts).encode("ascii")


def quantize(x, decimals=6):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    return parse_table(format_table(x, np.empty((x.size, 0)), decimals), 1).ravel()


def parse_table(data: bytes, ncols: int, path="<memory>", first_line: int = 1):
    if not data:
        return np.empty((0, ncols))
    if not data.endswith(b"\n"):
        raise TSVParseError(path, first_line + data.count(b"\n"), "missing trailing newline")
    lines = data[:-1].split(b"\n")
    clean = not data.translate(None, _NUMCHARS + b"\t\n")
    if clean and all(line.count(b"\t") == ncols - 1 for line in lines):
        try:
            out = np.array(b"\t".join(lines).split(b"\t")).astype(np.float64).reshape(len(lines), ncols)
        except ValueError:
            out = None
        if out is not None and np.all(np.isfinite(out)):
            # numpy accepts a few spellings strtod-strict parsing rejects (e.g. '', '1e')
            if all(f for f in b"\t".join(lines).split(b"\t")):
                return out
    return _parse_slow(lines, ncols, path, first_line)


def _parse_slow(lines, ncols, path, first_line):
    out = np.empty((len(lines), ncols))
    for row, line in enumerate(lines):
        fields = line.split(b"\t")
        for col, f in enumerate(fields):
            if col >= ncols:
                raise TSVParseError(path, first_line + row, f"expected {ncols} fields, got {len(fields)}")
            text = f.decode("utf-8", "replace")
            bad = f.translate(None, _NUMCHARS)
            try:
                if bad or not f:
                    raise ValueError
                v = float(text)
            except ValueError:
                raise TSVParseError(path, first_line + row, f"invalid number {text!r}") from None
            if not np.isfinite(v):
                raise TSVParseError(path, first_line + row, f"invalid number {text!r}")
            out[row, col] = v
        if len(fields) != ncols:
            raise TSVParseError(path, first_line + row, f"expected {ncols} fields, got {len(fields)}")
    return out
