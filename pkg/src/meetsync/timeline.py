"""Authoritative timeline: clock models, timing anchors and the time-mapping algebra.

All times are seconds relative to session start on the authoritative
timeline, which is the protocol host clock (the event logger). A device
clock maps onto it through an affine model::

    t_auth = offset_s + (1 + drift_ppm * 1e-6) * t_device
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateModelError, InvalidTimeError

PPM = 1e-6


class Tier(str, enum.Enum):
    """Provenance class of a timing anchor, highest trust first."""

    LSL = "lsl"
    EVENT_LOG = "event_log"
    FRAME_LOG = "frame_log"
    SIDECAR = "sidecar"
    UNALIGNED = "unaligned"

    def __str__(self) -> str:
        return self.value


#: Anchor tiers in priority order; ``UNALIGNED`` is a model state, not an anchor tier.
TIER_ORDER = (Tier.LSL, Tier.EVENT_LOG, Tier.FRAME_LOG, Tier.SIDECAR)


@dataclass(frozen=True)
class ClockModel:
    device_id: str
    offset_s: float = 0.0
    drift_ppm: float = 0.0
    anchor_count: int = 0
    rms_residual_s: float = 0.0
    source_tier: Tier = Tier.UNALIGNED

    def __post_init__(self):
        object.__setattr__(self, "source_tier", Tier(self.source_tier))
        if self.anchor_count < 0:
            raise ValueError("anchor_count must be >= 0")
        if not self.rms_residual_s >= 0:
            raise ValueError("rms_residual_s must be >= 0")
        if (self.source_tier is Tier.UNALIGNED) != (self.anchor_count == 0):
            raise ValueError(
                f"{self.device_id}: source_tier 'unaligned' iff anchor_count == 0 "
                f"(got {self.source_tier.value}, {self.anchor_count})"
            )

    @property
    def slope(self) -> float:
        return 1.0 + self.drift_ppm * PPM

    @property
    def aligned(self) -> bool:
        return self.source_tier is not Tier.UNALIGNED

    @classmethod
    def identity(cls, device_id: str, tier: Tier = Tier.EVENT_LOG, anchor_count: int = 1) -> "ClockModel":
        return cls(device_id, 0.0, 0.0, anchor_count, 0.0, tier)

    @classmethod
    def unaligned(cls, device_id: str) -> "ClockModel":
        return cls(device_id)

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "offset_s": self.offset_s,
            "drift_ppm": self.drift_ppm,
            "anchor_count": self.anchor_count,
            "rms_residual_s": self.rms_residual_s,
            "source_tier": self.source_tier.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClockModel":
        return cls(
            d["device_id"],
            float(d["offset_s"]),
            float(d["drift_ppm"]),
            int(d["anchor_count"]),
            float(d["rms_residual_s"]),
            Tier(d["source_tier"]),
        )


@dataclass(frozen=True)
class TimeAnchor:
    """One paired observation of a device clock against the authoritative clock."""

    device_id: str
    t_device_s: float
    t_auth_s: float
    tier: Tier
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "tier", Tier(self.tier))
        if self.tier is Tier.UNALIGNED:
            raise ValueError("anchors cannot carry the 'unaligned' tier")
        if not (math.isfinite(self.t_device_s) and math.isfinite(self.t_auth_s)):
            raise InvalidTimeError(f"non-finite anchor time for {self.device_id}")
        if not self.weight >= 0:
            raise ValueError("anchor weight must be >= 0")


@dataclass(frozen=True)
class DeviceTiming:
    device_id: str
    model: ClockModel
    rms_residual_s: float
    max_abs_residual_s: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "model": self.model.to_dict(),
            "rms_residual_s": self.rms_residual_s,
            "max_abs_residual_s": self.max_abs_residual_s,
            "pass": self.passed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceTiming":
        return cls(
            d["device_id"],
            ClockModel.from_dict(d["model"]),
            float(d["rms_residual_s"]),
            float(d["max_abs_residual_s"]),
            bool(d["pass"]),
        )


@dataclass(frozen=True)
class TimingReport:
    tolerance_s: float
    devices: tuple = ()
    demotions: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return all(d.passed for d in self.devices)

    def device(self, device_id: str) -> DeviceTiming:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)

    def to_dict(self) -> dict:
        return {
            "tolerance_s": self.tolerance_s,
            "devices": [d.to_dict() for d in self.devices],
            "demotions": [dict(x) for x in self.demotions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimingReport":
        return cls(
            float(d["tolerance_s"]),
            tuple(DeviceTiming.from_dict(x) for x in d["devices"]),
            tuple(dict(x) for x in d.get("demotions", ())),
        )


def _check_finite(t, what="time"):
    if isinstance(t, np.ndarray):
        if not np.all(np.isfinite(t)):
            raise InvalidTimeError(f"non-finite {what} in input array")
    elif not math.isfinite(t):
        raise InvalidTimeError(f"non-finite {what}: {t!r}")


def map_time(model: ClockModel, t_device_s):
    """Map device-clock seconds onto the authoritative timeline.

    Accepts a scalar or a numpy array.
    """
    if model.slope <= 0:
        raise DegenerateModelError(f"{model.device_id}: slope {model.slope} <= 0")
    _check_finite(t_device_s)
    return model.offset_s + model.slope * t_device_s


def unmap_time(model: ClockModel, t_auth_s):
    """Inverse of :func:`map_time`."""
    slope = model.slope
    if slope <= 0:
        raise DegenerateModelError(f"{model.device_id}: slope {slope} <= 0")
    _check_finite(t_auth_s)
    return (t_auth_s - model.offset_s) / slope


@dataclass(frozen=True)
class Residuals:
    rms_s: float
    max_abs_s: float
    residuals: np.ndarray
    empty: bool = False


def anchor_arrays(anchors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(anchors)
    td = np.fromiter((a.t_device_s for a in anchors), float, n)
    ta = np.fromiter((a.t_auth_s for a in anchors), float, n)
    w = np.fromiter((a.weight for a in anchors), float, n)
    return td, ta, w


def model_residuals(model: ClockModel, anchors) -> Residuals:
    """Residuals ``t_auth - map_time(model, t_device)`` of a model against anchors."""
    if not anchors:
        return Residuals(0.0, 0.0, np.empty(0), empty=True)
    for a in anchors:
        if a.device_id != model.device_id:
            raise ValueError(f"anchor for {a.device_id!r} checked against model of {model.device_id!r}")
    td, ta, _ = anchor_arrays(anchors)
    # offset + drift*t form keeps full precision when slope ~ 1
    r = (ta - td) - (model.offset_s + model.drift_ppm * PPM * td)
    return Residuals(float(np.sqrt(np.mean(r * r))), float(np.max(np.abs(r))), r)
