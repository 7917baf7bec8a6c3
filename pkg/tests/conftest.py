import json

import numpy as np
import pytest

from meetsync import kernels

BACKENDS = [kernels.python] + ([kernels.compiled] if kernels.compiled is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda m: m.BACKEND)
def backend(request):
    return request.param


MINI_SCENARIO = {
    "blocks": [
        {"task_id": "T0", "phases": [{"name": "free_talk", "duration_s": 40}]},
        {
            "task_id": "T1",
            "phases": [
                {"name": "reading", "duration_s": 10},
                {"name": "discussion", "duration_s": 40, "prompt_eligible": True},
                {"name": "selection", "duration_s": 10},
            ],
        },
        {
            "task_id": "T2",
            "phases": [
                {"name": "negotiation", "duration_s": 40, "prompt_eligible": True},
                {"name": "settlement_form", "duration_s": "UNTIMED"},
            ],
        },
        {
            "task_id": "T3",
            "phases": [
                {"name": "generation", "duration_s": 20},
                {"name": "board_discussion", "duration_s": 30, "prompt_eligible": True},
                {"name": "selection", "duration_s": 10},
            ],
        },
        {
            "task_id": "T4",
            "phases": [
                {"name": "contribution", "duration_s": 10},
                {"name": "reveal", "duration_s": 20, "prompt_eligible": True, "trigger_events": ["phase_start"]},
                {"name": "discussion", "duration_s": 30, "prompt_eligible": True},
            ],
        },
    ]
}


def mini_config(**over):
    """A five-block session of ~5 minutes so CLI tests stay fast."""
    cfg = {
        "scenario": MINI_SCENARIO,
        "untimed_durations": {"settlement_form": 20},
        "prompt_policy": {"initial_delay_s": 10, "periodic_s": 20, "min_spacing_s": 15, "end_guard_s": 5},
        "anchor_cadence_s": 10.0,
        "seed": 7,
    }
    cfg.update(over)
    return cfg


@pytest.fixture
def write_config(tmp_path):
    def _write(name="config.json", **over):
        p = tmp_path / name
        p.write_text(json.dumps(mini_config(**over)))
        return p

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
