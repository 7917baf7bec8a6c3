# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Semantics must match ``meetsync._pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, realloc, free, strtod
from libc.stdio cimport snprintf
from libc.math cimport isfinite, fma, rint, fabs, signbit, copysign
from libc.stdint cimport int64_t
from cpython.bytes cimport PyBytes_FromStringAndSize

cnp.import_array()

BACKEND = "cython"


def pairwise_slopes(const double[::1] x, const double[::1] y):
    cdef Py_ssize_t n = x.shape[0], i, j, k = 0
    cdef double dx
    out = np.empty(n * (n - 1) // 2 if n > 1 else 0, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[j] - x[i]
            if dx != 0.0:
                o[k] = (y[j] - y[i]) / dx
                k += 1
    return out[:k]


def pair_slopes(const double[::1] x, const double[::1] y,
                const cnp.int64_t[::1] ii, const cnp.int64_t[::1] jj):
    cdef Py_ssize_t m = ii.shape[0], p, k = 0
    cdef double dx
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    for p in range(m):
        dx = x[jj[p]] - x[ii[p]]
        if dx != 0.0:
            o[k] = (y[jj[p]] - y[ii[p]]) / dx
            k += 1
    return out[:k]


def gap_indices(const double[::1] t, double threshold):
    cdef Py_ssize_t n = t.shape[0], i, k = 0
    out = np.empty(n - 1 if n > 1 else 0, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for i in range(n - 1):
        if t[i + 1] - t[i] > threshold:
            o[k] = i
            k += 1
    return out[:k]


cdef double _POW10[10]
_POW10[:] = [1e0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8, 1e9]


cdef inline double _round_scaled(double x, double scale) noexcept nogil:
    # rint(x*scale) corrected to the exact round-half-even of the true product
    cdef double p = x * scale
    cdef double e = fma(x, scale, -p)
    cdef double q = rint(p)
    cdef double d = p - q
    if d == 0.5 and e > 0:
        q += 1.0
    elif d == -0.5 and e < 0:
        q -= 1.0
    return q


def quantize(const double[::1] x, int decimals=6):
    """Values exactly as they read back after fixed-point formatting."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef double scale, q
    cdef char buf[400]
    if decimals < 0 or decimals > 9:
        raise ValueError("decimals must be in 0..9")
    scale = _POW10[decimals]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        if fabs(x[i] * scale) < 4.5e15:
            q = _round_scaled(x[i], scale)
            o[i] = copysign(fabs(q) / scale, x[i])
        else:
            snprintf(buf, 400, "%.*f", decimals, x[i])
            o[i] = strtod(buf, NULL)
    return out


cdef inline Py_ssize_t _put_fixed(char* out, double x, int decimals, double scale) noexcept nogil:
    """Write ``x`` like printf("%.*f"), exact round-half-even; returns bytes written or -1."""
    cdef double p = x * scale
    cdef double q
    cdef int64_t iq, ip, fr
    cdef Py_ssize_t w = 0, k
    cdef char tmp[24]
    if not (fabs(p) < 4.5e15):
        return -1
    q = _round_scaled(x, scale)
    iq = <int64_t>fabs(q)
    if signbit(x):
        out[w] = c'-'
        w += 1
    ip = iq
    fr = 0
    if decimals > 0:
        ip = iq // <int64_t>scale
        fr = iq - ip * <int64_t>scale
    k = 0
    while True:
        tmp[k] = <char>(c'0' + ip % 10)
        k += 1
        ip //= 10
        if ip == 0:
            break
    while k > 0:
        k -= 1
        out[w] = tmp[k]
        w += 1
    if decimals > 0:
        out[w] = c'.'
        w += 1
        for k in range(decimals - 1, -1, -1):
            out[w + k] = <char>(c'0' + fr % 10)
            fr //= 10
        w += decimals
    return w


def format_table(const double[::1] t, const double[:, ::1] values, int decimals=6):
    cdef Py_ssize_t n = t.shape[0], k = values.shape[1], i, c, w
    cdef size_t cap = <size_t>(n * (k + 1) * 16 + 64), pos = 0
    cdef char* buf = <char*>malloc(cap)
    cdef char* grown
    cdef double v, scale
    if decimals < 0 or decimals > 9:
        raise ValueError("decimals must be in 0..9")
    scale = _POW10[decimals]
    if buf == NULL:
        raise MemoryError()
    try:
        for i in range(n):
            for c in range(k + 1):
                # worst case for %.9f of a finite double is ~330 chars
                if cap - pos < 400:
                    cap = cap * 2 + 400
                    grown = <char*>realloc(buf, cap)
                    if grown == NULL:
                        raise MemoryError()
                    buf = grown
                v = t[i] if c == 0 else values[i, c - 1]
                w = _put_fixed(buf + pos, v, decimals, scale)
                if w < 0:
                    w = snprintf(buf + pos, cap - pos, "%.*f", decimals, v)
                pos += w
                buf[pos] = b'\n' if c == k else b'\t'
                pos += 1
        return PyBytes_FromStringAndSize(buf, pos)
    finally:
        free(buf)


cdef inline bint _numchar(char ch):
    return (b'0' <= ch <= b'9') or ch == b'.' or ch == b'-' or ch == b'+' or ch == b'e' or ch == b'E'


def parse_table(bytes data, int ncols, path="<memory>", Py_ssize_t first_line=1):
    from .errors import TSVParseError
    cdef const char* s = data
    cdef Py_ssize_t n = len(data), pos = 0, line_start, field_start, p, nrows = 0, row = 0, col
    cdef char* endp
    cdef double v
    if n == 0:
        return np.empty((0, ncols), dtype=np.float64)
    if s[n - 1] != b'\n':
        nl = data.count(b"\n")
        raise TSVParseError(path, first_line + nl, "missing trailing newline")
    for p in range(n):
        if s[p] == b'\n':
            nrows += 1
    out = np.empty((nrows, ncols), dtype=np.float64)
    cdef double[:, ::1] o = out
    while pos < n:
        line_start = pos
        col = 0
        while True:
            field_start = pos
            while pos < n and s[pos] != b'\t' and s[pos] != b'\n':
                if not _numchar(s[pos]):
                    raise TSVParseError(path, first_line + row, _bad_field(data, field_start))
                pos += 1
            if col >= ncols:
                raise TSVParseError(path, first_line + row, _count_msg(data, line_start, ncols))
            if pos == field_start:
                raise TSVParseError(path, first_line + row, "invalid number ''")
            v = strtod(s + field_start, &endp)
            if endp != s + pos or not isfinite(v):
                raise TSVParseError(path, first_line + row, _bad_field(data, field_start))
            o[row, col] = v
            col += 1
            if s[pos] == b'\n':
                break
            pos += 1
        if col != ncols:
            raise TSVParseError(path, first_line + row, _count_msg(data, line_start, ncols))
        pos += 1
        row += 1
    return out


def _bad_field(bytes data, Py_ssize_t start):
    end = start
    while end < len(data) and data[end] not in (9, 10):
        end += 1
    return f"invalid number {data[start:end].decode('utf-8', 'replace')!r}"


def _count_msg(bytes data, Py_ssize_t start, int ncols):
    end = data.index(b"\n", start)
    got = data.count(b"\t", start, end) + 1
    return f"expected {ncols} fields, got {got}"
