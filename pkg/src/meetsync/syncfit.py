"""Clock-model recovery from timing anchors, stream alignment and validation."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateGeometryError, UnalignedStreamError
from .timeline import (
    PPM,
    TIER_ORDER,
    ClockModel,
    DeviceTiming,
    Tier,
    TimeAnchor,
    TimingReport,
    anchor_arrays,
    map_time,
    model_residuals,
)

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE_S = 0.005
THEIL_SEN_FULL_PAIRS_MAX_N = 2000
THEIL_SEN_SAMPLED_PAIRS = 2_000_000


class Method(str, enum.Enum):
    LEAST_SQUARES = "least_squares"
    THEIL_SEN = "theil_sen"


@dataclass(frozen=True)
class FitMethod:
    method: Method = Method.THEIL_SEN
    min_anchors_full_model: int = 8
    offset_only_fallback: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.min_anchors_full_model < 2:
            raise ValueError("min_anchors_full_model must be >= 2")


class AnchorPool:
    """Anchors grouped by device and tier."""

    def __init__(self, anchors: Iterable[TimeAnchor] = ()):
        self._groups: dict = {}
        for a in anchors:
            self.add(a)

    def add(self, anchor: TimeAnchor):
        self._groups.setdefault(anchor.device_id, {}).setdefault(anchor.tier, []).append(anchor)

    def devices(self) -> list:
        return sorted(self._groups)

    def get(self, device_id: str, tier: Tier) -> list:
        return list(self._groups.get(device_id, {}).get(Tier(tier), ()))

    def tiers(self, device_id: str) -> dict:
        return {t: list(v) for t, v in self._groups.get(device_id, {}).items()}

    def __len__(self):
        return sum(len(v) for g in self._groups.values() for v in g.values())


def select_anchors(device_id: str, pool: AnchorPool, below: Tier | None = None):
    """Highest-priority non-empty tier for ``device_id``: lsl > event_log > frame_log > sidecar.

    ``below`` restricts the search to tiers ranked lower than it (used by repair).
    """
    order = TIER_ORDER
    if below is not None and below is not Tier.UNALIGNED:
        order = order[order.index(Tier(below)) + 1:]
    for tier in order:
        anchors = pool.get(device_id, tier)
        if anchors:
            return anchors, tier
    return [], Tier.UNALIGNED


def _theil_sen(x: np.ndarray, d: np.ndarray, seed: int) -> tuple:
    n = x.size
    if n <= THEIL_SEN_FULL_PAIRS_MAX_N:
        slopes = kernels.pairwise_slopes(x, d)
    else:
        rng = np.random.default_rng(seed)
        ii = rng.integers(0, n, THEIL_SEN_SAMPLED_PAIRS)
        jj = rng.integers(0, n - 1, THEIL_SEN_SAMPLED_PAIRS)
        jj += jj >= ii  # uniform over j != i
        slopes = kernels.pair_slopes(x, d, ii.astype(np.int64), jj.astype(np.int64))
    if slopes.size == 0:
        raise DegenerateGeometryError("all anchors share one device time")
    slope = float(np.median(slopes))
    intercept = float(np.median(d - slope * x))
    return intercept, slope


def _least_squares(x: np.ndarray, d: np.ndarray, w: np.ndarray) -> tuple:
    if not np.any(w > 0):
        w = np.ones_like(x)
    xm = np.average(x, weights=w)
    dm = np.average(d, weights=w)
    xc = x - xm
    sxx = float(np.sum(w * xc * xc))
    if sxx == 0.0:
        raise DegenerateGeometryError("all anchors share one device time")
    slope = float(np.sum(w * xc * (d - dm))) / sxx
    return dm - slope * xm, slope


def fit_clock_model(anchors: Sequence[TimeAnchor], method: FitMethod = FitMethod(), device_id: str | None = None) -> ClockModel:
    """Estimate the affine device->authoritative map from anchors of one device.

    The regression is done on ``t_auth - t_device`` against ``t_device`` so the
    drift term is estimated directly instead of as ``slope - 1``.
    """
    if not anchors:
        if device_id is None:
            raise ValueError("device_id is required to build an unaligned model from no anchors")
        return ClockModel.unaligned(device_id)
    dev = anchors[0].device_id
    if any(a.device_id != dev for a in anchors):
        raise ValueError("anchors span several devices")
    tier = anchors[0].tier
    x, ta, w = anchor_arrays(anchors)
    if method.method is Method.THEIL_SEN:
        keep = w > 0
        if keep.any():
            x, ta, w = x[keep], ta[keep], w[keep]
    d = ta - x
    n = x.size
    distinct = np.unique(x).size
    if n >= 2 and distinct < 2:
        raise DegenerateGeometryError(f"{dev}: all {n} anchors share device time {x[0]!r}")
    if n >= method.min_anchors_full_model:
        if method.method is Method.THEIL_SEN:
            offset, drift = _theil_sen(x, d, method.seed)
        else:
            offset, drift = _least_squares(x, d, w)
        drift_ppm = drift / PPM
    elif method.offset_only_fallback:
        offset, drift_ppm = float(np.median(d)), 0.0
    else:
        # too few anchors for the configured threshold and no fallback: exact/LS fit anyway
        offset, drift = _least_squares(x, d, w) if n >= 2 else (float(d[0]), 0.0)
        drift_ppm = drift / PPM
    r = d - (offset + drift_ppm * PPM * x)
    rms = float(np.sqrt(np.mean(r * r)))
    return ClockModel(dev, float(offset), float(drift_ppm), int(len(anchors)), rms, tier)


def align_stream(t_device: np.ndarray, model: ClockModel, stream_id: str = "?") -> tuple:
    """Map device timestamps onto the authoritative timeline.

    Returns ``(t_auth, order)`` where ``order`` re-sorts the samples if read
    jitter inverted neighbours; values must be permuted with it.
    """
    if not model.aligned:
        raise UnalignedStreamError(stream_id, model.device_id)
    t_auth = map_time(model, np.asarray(t_device, dtype=np.float64))
    if t_auth.size > 1 and np.any(np.diff(t_auth) < 0):
        order = np.argsort(t_auth, kind="stable")
        return t_auth[order], order
    return t_auth, None


def align_samples(samples, model: ClockModel, stream_id: str = "?") -> list:
    """Record-wise variant of :func:`align_stream`: ``[(t_auth, values), ...]``."""
    t = np.array([s.t_device_s for s in samples], dtype=np.float64)
    t_auth, order = align_stream(t, model, stream_id)
    idx = order if order is not None else range(len(samples))
    return [(float(ta), samples[i].values) for ta, i in zip(t_auth, idx)]


def _device_timing(model: ClockModel, pool: AnchorPool, tolerance_s: float) -> DeviceTiming:
    if not model.aligned:
        return DeviceTiming(model.device_id, model, 0.0, 0.0, False)
    res = model_residuals(model, pool.get(model.device_id, model.source_tier))
    return DeviceTiming(model.device_id, model, res.rms_s, res.max_abs_s, res.rms_s <= tolerance_s)


def validate_session_alignment(
    models: Mapping[str, ClockModel],
    pool: AnchorPool,
    tolerance_s: float = DEFAULT_TOLERANCE_S,
    demotions: Sequence[dict] = (),
) -> TimingReport:
    """Residuals of every device's model against its own tier's anchors."""
    if not tolerance_s > 0:
        raise ValueError("tolerance_s must be > 0")
    devices = tuple(_device_timing(models[dev], pool, tolerance_s) for dev in sorted(models))
    return TimingReport(tolerance_s, devices, tuple(demotions))


def fit_session(
    device_ids: Iterable[str],
    pool: AnchorPool,
    method: FitMethod = FitMethod(),
    tolerance_s: float = DEFAULT_TOLERANCE_S,
    repair: bool = True,
) -> tuple:
    """Fit every device on its best tier; when that fails tolerance, refit on lower tiers.

    The first lower-tier model that passes replaces the original; if none
    does, the top-tier model is kept. Every attempt is logged in the report.
    Returns ``(models, report)``.
    """
    models, demotions = {}, []
    for dev in sorted(set(device_ids) | set(pool.devices())):
        anchors, tier = select_anchors(dev, pool)
        model = _fit_or_unaligned(dev, anchors, method)
        if repair and model.aligned:
            timing = _device_timing(model, pool, tolerance_s)
            current = model
            while not timing.passed:
                lower, lower_tier = select_anchors(dev, pool, below=current.source_tier)
                if not lower:
                    break
                candidate = _fit_or_unaligned(dev, lower, method)
                cand_timing = _device_timing(candidate, pool, tolerance_s)
                demotions.append(
                    {
                        "device_id": dev,
                        "from_tier": current.source_tier.value,
                        "to_tier": lower_tier.value,
                        "from_rms_s": timing.rms_residual_s,
                        "to_rms_s": cand_timing.rms_residual_s,
                        "accepted": cand_timing.passed,
                    }
                )
                log.warning("%s: %s anchors fail tolerance, refitting on %s", dev, current.source_tier.value, lower_tier.value)
                if cand_timing.passed:
                    model = candidate
                    break
                current, timing = candidate, cand_timing
        models[dev] = model
    return models, validate_session_alignment(models, pool, tolerance_s, demotions)


def _fit_or_unaligned(dev, anchors, method):
    if not anchors:
        return ClockModel.unaligned(dev)
    try:
        return fit_clock_model(anchors, method)
    except DegenerateGeometryError:
        log.error("%s: degenerate anchor geometry, device left unaligned", dev)
        return ClockModel.unaligned(dev)
