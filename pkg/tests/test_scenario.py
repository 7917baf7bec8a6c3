import json
import time
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from meetsync.errors import ConfigurationError
from meetsync.scenario import (
    UNTIMED,
    Block,
    EventRecord,
    Phase,
    PromptPolicy,
    Scenario,
    block_windows,
    build_spine,
    default_scenario,
    run_scenario,
    schedule_prompts,
    session_span,
)
from meetsync.tsvio import events_tsv_bytes, parse_events_tsv

GOLDEN = Path(__file__).parent / "golden"

# the protocol's phase timing table, in seconds
TIMING_TABLE = {
    "T0": [("free_talk", 300)],
    "T1": [("reading", 75), ("discussion", 420), ("selection", 60)],
    "T2": [("negotiation", 480), ("settlement_form", UNTIMED)],
    "T3": [("generation", 180), ("board_discussion", 420), ("selection", 60)],
    "T4": [("contribution", 60), ("reveal", 60), ("discussion", 180)],
}


def phase_rows(events):
    return [e for e in events if e.event_type == "phase_start"]


class TestDefaultScenario:
    def test_matches_timing_table(self):
        sc = default_scenario()
        got = {b.task_id: [(p.name, p.duration_s) for p in b.phases] for b in sc.blocks}
        assert got == TIMING_TABLE

    def test_json_golden(self):
        assert default_scenario().to_json() == (GOLDEN / "default_scenario.json").read_text()

    def test_json_round_trip(self):
        sc = default_scenario()
        assert Scenario.from_dict(json.loads(sc.to_json())) == sc

    def test_eligible_phases(self):
        sc = default_scenario()
        eligible = {(b.task_id, p.name) for b in sc.blocks for p in b.phases if p.prompt_eligible}
        assert eligible == {("T1", "discussion"), ("T2", "negotiation"), ("T3", "board_discussion"),
                            ("T4", "reveal"), ("T4", "discussion")}


class TestRunScenario:
    def test_events_golden(self):
        events = run_scenario(default_scenario(), {"settlement_form": 120})
        assert events_tsv_bytes(events) == (GOLDEN / "default_events.tsv").read_bytes()

    def test_total_duration(self):
        # 300 + 555 + (480 + 120) + 660 + 300
        events = run_scenario(default_scenario(), {"T2/settlement_form": 120})
        assert session_span(events) == (0.0, 2415.0)

    def test_phase_durations_follow_table(self):
        events = run_scenario(default_scenario(), {"settlement_form": 95.5})
        expected = [(t, n, 95.5 if d == UNTIMED else float(d)) for t, ph in TIMING_TABLE.items() for n, d in ph]
        assert [(e.task, e.phase, e.duration_s) for e in phase_rows(events)] == expected

    def test_untimed_marked(self):
        events = run_scenario(default_scenario(), {"settlement_form": 10})
        assert [e.phase for e in phase_rows(events) if e.value == "untimed"] == ["settlement_form"]

    def test_missing_untimed_duration(self):
        with pytest.raises(ConfigurationError, match="settlement_form"):
            run_scenario(default_scenario(), {})

    def test_gap_between_blocks(self):
        events = run_scenario(default_scenario(), {"settlement_form": 120}, gap_between_blocks_s=10)
        win = block_windows(events)
        assert win["T1"] == (310.0, 865.0)
        assert session_span(events)[1] == 2455.0

    def test_block_windows(self):
        win = block_windows(run_scenario(default_scenario(), {"settlement_form": 120}))
        assert win == {"T0": (0, 300), "T1": (300, 855), "T2": (855, 1455), "T3": (1455, 2115), "T4": (2115, 2415)}

    def test_fast(self):
        t0 = time.perf_counter()
        build_spine(default_scenario(), {"settlement_form": 120}, policy=PromptPolicy())
        assert time.perf_counter() - t0 < 1.0

    def test_tsv_round_trip(self):
        spine = build_spine(default_scenario(), {"settlement_form": 120}, policy=PromptPolicy())
        data = events_tsv_bytes(spine)
        assert events_tsv_bytes(parse_events_tsv(data)) == data


class TestValidation:
    def test_zero_duration(self):
        with pytest.raises(ConfigurationError):
            Phase("x", 0)

    def test_duplicate_phase(self):
        with pytest.raises(ConfigurationError):
            Block("T0", (Phase("a", 1), Phase("a", 2)))

    def test_duplicate_task(self):
        with pytest.raises(ConfigurationError):
            Scenario((Block("T0", (Phase("a", 1),)), Block("T0", (Phase("b", 1),))))

    def test_malformed_document(self):
        with pytest.raises(ConfigurationError):
            Scenario.from_dict({"blocks": [{"phases": []}]})

    def test_negative_onset(self):
        with pytest.raises(ValueError):
            EventRecord(-1.0, "x")

    def test_policy_unknown_field(self):
        with pytest.raises(ConfigurationError):
            PromptPolicy.from_dict({"every": 3})


def default_prompts(policy=PromptPolicy()):
    events = run_scenario(default_scenario(), {"settlement_form": 120})
    return events, schedule_prompts(events, policy)


class TestPrompts:
    def test_discussion_offsets(self):
        events, prompts = default_prompts()
        start = 375.0  # T1 discussion, 420 s long: 60, 180, 300 fit, 420 is past the guard
        got = sorted({p.onset_s - start for p in prompts if (p.task, p.phase) == ("T1", "discussion")})
        assert got == [60.0, 180.0, 300.0]

    def test_each_participant_prompted(self):
        _, prompts = default_prompts()
        at = [p.participant for p in prompts if p.onset_s == 435.0]
        assert sorted(at) == ["P1", "P2", "P3", "P4"]

    def test_reveal_trigger(self):
        _, prompts = default_prompts()
        reveal = [p for p in prompts if p.phase == "reveal"]
        assert {p.onset_s for p in reveal} == {2177.0}
        assert len(reveal) == 4

    def test_no_prompts_outside_eligible(self):
        _, prompts = default_prompts()
        assert {(p.task, p.phase) for p in prompts} <= {("T1", "discussion"), ("T2", "negotiation"),
                                                      ("T3", "board_discussion"), ("T4", "reveal"),
                                                      ("T4", "discussion")}

    def test_prompt_payload(self):
        _, prompts = default_prompts()
        assert prompts[0].event_type == "prompt_vad"
        assert prompts[0].value == "valence;arousal;dominance;scale=1-9"

    def test_spacing_drops_trigger(self):
        events = [
            EventRecord(0.0, "phase_start", 100.0, task="T4", phase="reveal"),
            EventRecord(30.0, "phase_start", 100.0, task="T4", phase="discussion"),
        ]
        sc = Scenario((Block("T4", (Phase("reveal", 30, True, ("phase_start",)), Phase("discussion", 100, True))),))
        # trigger at 2 s; discussion initial at 40 s is closer than 90 s and is dropped
        prompts = schedule_prompts(events, PromptPolicy(initial_delay_s=10, periodic_s=None), sc, ["P1"])
        assert [p.onset_s for p in prompts] == [2.0]

    def test_second_reveal_trigger_suppressed(self):
        sc = Scenario((Block("T4", (Phase("reveal", 60, True, ("phase_start", "reveal_card")),)),))
        events = [
            EventRecord(0.0, "phase_start", 60.0, task="T4", phase="reveal"),
            EventRecord(30.0, "reveal_card", task="T4", phase="reveal"),
        ]
        prompts = schedule_prompts(events, PromptPolicy(), sc, ["P1"])
        assert [p.onset_s for p in prompts] == [2.0]

    def test_participant_specific_trigger(self):
        sc = Scenario((Block("T9", (Phase("p", 100, True, ("contribution",)),)),))
        events = [
            EventRecord(0.0, "phase_start", 100.0, task="T9", phase="p"),
            EventRecord(20.0, "contribution", task="T9", phase="p", participant="P3"),
        ]
        prompts = schedule_prompts(events, PromptPolicy(initial_delay_s=200), sc)
        assert [(p.onset_s, p.participant) for p in prompts] == [(22.0, "P3")]


@given(
    st.floats(1, 200), st.one_of(st.none(), st.floats(5, 300)), st.floats(1, 200), st.floats(0, 60),
    st.floats(1, 600),
)
@settings(max_examples=60, deadline=None)
def test_prompt_invariants(initial, periodic, spacing, guard, untimed):
    policy = PromptPolicy(initial_delay_s=initial, periodic_s=periodic, min_spacing_s=spacing, end_guard_s=guard)
    events = run_scenario(default_scenario(), {"settlement_form": untimed})
    prompts = schedule_prompts(events, policy)
    eligible = {(b.task_id, p.name) for b in default_scenario().blocks for p in b.phases if p.prompt_eligible}
    windows = {(e.task, e.phase): (e.onset_s, e.onset_s + e.duration_s) for e in phase_rows(events)}
    by_participant = {}
    for p in prompts:
        assert (p.task, p.phase) in eligible
        start, end = windows[(p.task, p.phase)]
        assert start <= p.onset_s <= end - guard + 1e-6
        by_participant.setdefault(p.participant, []).append(p.onset_s)
    for times in by_participant.values():
        assert all(b - a >= spacing - 1e-9 for a, b in zip(times, times[1:]))
    assert schedule_prompts(events, policy) == prompts


@given(st.floats(0.5, 1000), st.floats(0, 50))
@settings(max_examples=50)
def test_spine_sorted_and_contiguous(untimed, gap):
    events = run_scenario(default_scenario(), {"settlement_form": untimed}, gap)
    onsets = [e.onset_s for e in events]
    assert onsets == sorted(onsets)
    phases = phase_rows(events)
    for a, b in zip(phases, phases[1:]):
        if a.task == b.task:
            assert a.onset_s + a.duration_s == pytest.approx(b.onset_s, abs=1e-9)
