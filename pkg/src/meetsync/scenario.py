"""Protocol blocks as data, the phase state machine and self-report prompt scheduling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ConfigurationError

UNTIMED = "UNTIMED"
TASK_IDS = ("T0", "T1", "T2", "T3", "T4")
PARTICIPANTS = ("P1", "P2", "P3", "P4")
NA = "n/a"

SPINE_COLUMNS = ("onset", "duration", "task", "phase", "participant", "stream", "event_type", "value")
VAD_DIMENSIONS = ("valence", "arousal", "dominance")


@dataclass(frozen=True)
class Phase:
    name: str
    duration_s: object  # float seconds or UNTIMED
    prompt_eligible: bool = False
    trigger_events: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "trigger_events", tuple(self.trigger_events))
        if self.duration_s != UNTIMED:
            d = float(self.duration_s)
            if not (math.isfinite(d) and d > 0):
                raise ConfigurationError(f"phase {self.name!r}: timed duration must be > 0")
            object.__setattr__(self, "duration_s", d)

    @property
    def timed(self) -> bool:
        return self.duration_s != UNTIMED


@dataclass(frozen=True)
class Block:
    task_id: str
    phases: tuple

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ConfigurationError(f"block {self.task_id} has no phases")
        names = [p.name for p in self.phases]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"block {self.task_id} repeats a phase name")


@dataclass(frozen=True)
class Scenario:
    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        ids = [b.task_id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate task ids: {ids}")

    def block(self, task_id: str) -> Block:
        for b in self.blocks:
            if b.task_id == task_id:
                return b
        raise KeyError(task_id)

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {
                    "task_id": b.task_id,
                    "phases": [
                        {
                            "name": p.name,
                            "duration_s": p.duration_s,
                            "prompt_eligible": p.prompt_eligible,
                            "trigger_events": list(p.trigger_events),
                        }
                        for p in b.phases
                    ],
                }
                for b in self.blocks
            ]
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        try:
            return cls(
                tuple(
                    Block(
                        b["task_id"],
                        tuple(
                            Phase(
                                p["name"],
                                p["duration_s"],
                                bool(p.get("prompt_eligible", False)),
                                tuple(p.get("trigger_events", ())),
                            )
                            for p in b["phases"]
                        ),
                    )
                    for b in d["blocks"]
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"malformed scenario document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)


def default_scenario() -> Scenario:
    """The fixed five-block meeting protocol (T0 onboarding .. T4 public-goods game)."""
    return Scenario(
        (
            Block("T0", (Phase("free_talk", 300),)),
            Block(
                "T1",
                (
                    Phase("reading", 75),
                    Phase("discussion", 420, prompt_eligible=True),
                    Phase("selection", 60),
                ),
            ),
            Block(
                "T2",
                (
                    Phase("negotiation", 480, prompt_eligible=True),
                    Phase("settlement_form", UNTIMED),
                ),
            ),
            Block(
                "T3",
                (
                    Phase("generation", 180),
                    Phase("board_discussion", 420, prompt_eligible=True),
                    Phase("selection", 60),
                ),
            ),
            Block(
                "T4",
                (
                    Phase("contribution", 60),
                    Phase("reveal", 60, prompt_eligible=True, trigger_events=("phase_start",)),
                    Phase("discussion", 180, prompt_eligible=True),
                ),
            ),
        )
    )


_TYPE_RANK = {"session_start": 0, "block_end": 1, "block_start": 2, "phase_start": 3, "session_end": 5}


@dataclass(frozen=True)
class EventRecord:
    """One row of the session event spine. ``None`` fields are written as ``n/a``."""

    onset_s: float
    event_type: str
    duration_s: Optional[float] = None
    task: Optional[str] = None
    phase: Optional[str] = None
    participant: Optional[str] = None
    stream: Optional[str] = None
    value: Optional[str] = None

    def __post_init__(self):
        if not (math.isfinite(self.onset_s) and self.onset_s >= 0):
            raise ValueError(f"event onset must be finite and >= 0, got {self.onset_s}")
        if self.duration_s is not None and not self.duration_s >= 0:
            raise ValueError("event duration must be >= 0")

    def sort_key(self):
        # at equal onsets, closing boundaries precede opening ones; absent fields sort first
        return (
            self.onset_s,
            _TYPE_RANK.get(self.event_type, 4),
            self.task or "",
            self.phase or "",
            self.event_type,
            self.participant or "",
        )


def sort_events(events: Iterable[EventRecord]) -> list:
    return sorted(events, key=EventRecord.sort_key)


def _untimed_duration(untimed: Mapping, task_id: str, phase: Phase) -> float:
    for key in (f"{task_id}/{phase.name}", phase.name):
        if key in untimed:
            d = float(untimed[key])
            if not (math.isfinite(d) and d > 0):
                raise ConfigurationError(f"untimed phase {task_id}/{phase.name}: duration must be > 0")
            return d
    raise ConfigurationError(f"missing duration for untimed phase {task_id}/{phase.name}")


def run_scenario(
    scenario: Scenario,
    untimed_durations: Mapping[str, float] | None = None,
    gap_between_blocks_s: float = 0.0,
) -> list:
    """Run the phase state machine and return the boundary events, sorted.

    ``untimed_durations`` is keyed by ``"T2/settlement_form"`` or by bare phase name.
    """
    untimed = untimed_durations or {}
    if not gap_between_blocks_s >= 0:
        raise ConfigurationError("gap_between_blocks_s must be >= 0")
    # resolve every untimed phase first so the error names it before anything is emitted
    plan = []
    for block in scenario.blocks:
        durations = [p.duration_s if p.timed else _untimed_duration(untimed, block.task_id, p) for p in block.phases]
        plan.append((block, durations))

    events = []
    t = 0.0
    for k, (block, durations) in enumerate(plan):
        if k:
            t += gap_between_blocks_s
        block_start = t
        span = math.fsum(durations)
        events.append(EventRecord(block_start, "block_start", span, task=block.task_id))
        for phase, d in zip(block.phases, durations):
            value = None if phase.timed else "untimed"
            events.append(EventRecord(t, "phase_start", d, task=block.task_id, phase=phase.name, value=value))
            t += d
        events.append(EventRecord(t, "block_end", task=block.task_id))
    events.append(EventRecord(0.0, "session_start", t))
    events.append(EventRecord(t, "session_end"))
    return sort_events(events)


@dataclass(frozen=True)
class PromptPolicy:
    initial_delay_s: float = 60.0
    periodic_s: Optional[float] = 120.0
    min_spacing_s: float = 90.0
    end_guard_s: float = 15.0
    trigger_latency_s: float = 2.0
    dimensions: tuple = VAD_DIMENSIONS
    scale: tuple = (1, 9)

    def __post_init__(self):
        if not self.min_spacing_s > 0:
            raise ConfigurationError("min_spacing_s must be > 0")
        if not self.end_guard_s >= 0:
            raise ConfigurationError("end_guard_s must be >= 0")
        if self.periodic_s is not None and not self.periodic_s > 0:
            raise ConfigurationError("periodic_s must be > 0 when set")
        if tuple(self.dimensions) != VAD_DIMENSIONS:
            raise ConfigurationError("prompt dimensions are fixed to valence, arousal, dominance")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PromptPolicy":
        allowed = {"initial_delay_s", "periodic_s", "min_spacing_s", "end_guard_s", "trigger_latency_s"}
        extra = set(d) - allowed
        if extra:
            raise ConfigurationError(f"unknown prompt policy fields: {sorted(extra)}")
        return cls(**{k: (None if v is None else float(v)) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {
            "initial_delay_s": self.initial_delay_s,
            "periodic_s": self.periodic_s,
            "min_spacing_s": self.min_spacing_s,
            "end_guard_s": self.end_guard_s,
            "trigger_latency_s": self.trigger_latency_s,
        }


def _phase_windows(events: Sequence[EventRecord]):
    for ev in events:
        if ev.event_type == "phase_start":
            if ev.duration_s is None or ev.task is None or ev.phase is None:
                raise ValueError(f"malformed phase_start at {ev.onset_s}")
            yield ev.task, ev.phase, ev.onset_s, ev.onset_s + ev.duration_s


def schedule_prompts(
    events: Sequence[EventRecord],
    policy: PromptPolicy,
    scenario: Scenario | None = None,
    participants: Sequence[str] = PARTICIPANTS,
) -> list:
    """Valence/arousal/dominance prompt events for the eligible phases.

    Candidates are the initial prompt, the periodic ones and one per trigger
    event; they are visited in time order and a candidate closer than
    ``min_spacing_s`` to a participant's previously accepted prompt is
    dropped for that participant.
    """
    scenario = scenario or default_scenario()
    phase_cfg = {(b.task_id, p.name): p for b in scenario.blocks for p in b.phases}
    guard_eps = 1e-9

    candidates = []  # (time, participants)
    for task, name, start, end in _phase_windows(events):
        cfg = phase_cfg.get((task, name))
        if cfg is None or not cfg.prompt_eligible:
            continue
        latest = end - policy.end_guard_s + guard_eps
        t = start + policy.initial_delay_s
        while t <= latest:
            candidates.append((t, tuple(participants)))
            if policy.periodic_s is None:
                break
            t += policy.periodic_s
        if cfg.trigger_events:
            for ev in events:
                if ev.event_type not in cfg.trigger_events or not (start <= ev.onset_s < end):
                    continue
                if ev.task not in (None, task) or (ev.phase is not None and ev.phase != name):
                    continue
                t = ev.onset_s + policy.trigger_latency_s
                if t <= latest:
                    who = (ev.participant,) if ev.participant in participants else tuple(participants)
                    candidates.append((t, who))

    candidates.sort(key=lambda c: c[0])
    last = {}
    prompts = []
    value = ";".join(policy.dimensions) + f";scale={policy.scale[0]}-{policy.scale[1]}"
    for t, who in candidates:
        for p in who:
            prev = last.get(p)
            if prev is not None and t - prev < policy.min_spacing_s:
                continue
            last[p] = t
            task, name = _phase_at(events, t)
            prompts.append(EventRecord(t, "prompt_vad", task=task, phase=name, participant=p, value=value))
    return sort_events(prompts)


def _phase_at(events, t):
    for task, name, start, end in _phase_windows(events):
        if start <= t < end:
            return task, name
    return None, None


def build_spine(
    scenario: Scenario,
    untimed_durations: Mapping[str, float] | None = None,
    gap_between_blocks_s: float = 0.0,
    policy: PromptPolicy | None = None,
) -> list:
    """Boundary events plus scheduled prompts, as one sorted spine."""
    events = run_scenario(scenario, untimed_durations, gap_between_blocks_s)
    if policy is not None:
        events = sort_events(events + schedule_prompts(events, policy, scenario))
    return events


def block_windows(events: Sequence[EventRecord]) -> dict:
    """``task_id -> (block_start, block_end)`` from the spine's boundary events."""
    starts, ends = {}, {}
    for ev in events:
        if ev.event_type == "block_start" and ev.task:
            starts[ev.task] = ev.onset_s
        elif ev.event_type == "block_end" and ev.task:
            ends[ev.task] = ev.onset_s
    return {t: (starts[t], ends[t]) for t in starts if t in ends}


def session_span(events: Sequence[EventRecord]) -> tuple:
    start = next((e.onset_s for e in events if e.event_type == "session_start"), 0.0)
    end = next((e.onset_s for e in events if e.event_type == "session_end"), None)
    if end is None:
        end = max((e.onset_s + (e.duration_s or 0.0) for e in events), default=0.0)
    return start, end
