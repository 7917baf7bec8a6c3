"""Hot-loop kernels, compiled when available.

Set ``MEETSYNC_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels as python

compiled = None
if os.environ.get("MEETSYNC_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

_impl = compiled or python

BACKEND = _impl.BACKEND
pairwise_slopes = _impl.pairwise_slopes
pair_slopes = _impl.pair_slopes
gap_indices = _impl.gap_indices
format_table = _impl.format_table
parse_table = _impl.parse_table
quantize = _impl.quantize

__all__ = [
    "BACKEND",
    "compiled",
    "python",
    "pairwise_slopes",
    "pair_slopes",
    "gap_indices",
    "format_table",
    "parse_table",
    "quantize",
]
