import json

import pytest

from conftest import mini_config
from meetsync.errors import ConfigurationError, SessionExistsError
from meetsync.pipeline import PipelineConfig, align, run_end_to_end, simulate


def test_defaults_validate():
    cfg = PipelineConfig.from_dict({})
    assert cfg.tolerance_s == 0.005 and cfg.fit_method().method.value == "theil_sen"


@pytest.mark.parametrize(
    "bad",
    [
        {"seed": "x"},
        {"fit": {"method": "median"}},
        {"fit": {"tolerance_s": 0}},
        {"anchor_cadence_s": -1},
        {"devices": [{"device_id": "x", "colour": 1}]},
        {"devices": [{"device_id": "x", "tiers": ["gps"]}]},
        {"scenario": {"blocks": [{"task_id": "T0", "phases": [{"name": "a", "duration_s": 0}]}]}},
        {"prompt_policy": {"min_spacing_s": 0}},
        {"unknown": 1},
    ],
)
def test_invalid_config(bad):
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_dict(bad)


def test_override():
    cfg = PipelineConfig.from_dict({}).override(seed=5, tolerance_ms=2.0, method="least_squares")
    assert cfg.seed == 5 and cfg.tolerance_s == 0.002 and cfg.data["fit"]["method"] == "least_squares"


def test_provenance_ignores_output_root():
    a = PipelineConfig.from_dict({"out": "/a"}).provenance()
    b = PipelineConfig.from_dict({"out": "/b"}).provenance()
    assert a == b and "out" not in a["config"]


def test_truth_check_errors_small(tmp_path):
    root = tmp_path / "s"
    cfg = PipelineConfig.from_dict(mini_config())
    simulate(cfg, root)
    report = align(cfg, root)
    assert report.passed
    doc = json.loads((root / "derivatives" / "alignment_truth_check.json").read_text())
    for row in doc["devices"]:
        assert abs(row["offset_error_s"]) < 0.005


def test_device_without_anchors_is_fatal(tmp_path):
    cfg = PipelineConfig.from_dict(mini_config(devices=[{"device_id": "emotibit_P2", "tiers": []}]))
    summary = run_end_to_end(cfg, tmp_path / "s")
    assert summary.exit_code == 2
    codes = {(f.code, f.subject) for f in summary.findings}
    assert ("device_unaligned", "emotibit_P2") in codes
    assert ("stream_unaligned", "physio_P2") in codes
    streams = json.loads((tmp_path / "s" / "ses-001_streams.json").read_text())
    assert streams["missing"] == {"physio_P2": "unaligned"}


def test_unknown_device_override(tmp_path):
    cfg = PipelineConfig.from_dict(mini_config(devices=[{"device_id": "nope"}]))
    with pytest.raises(ConfigurationError):
        simulate(cfg, tmp_path / "s")


def test_simulate_refuses_non_empty(tmp_path):
    (tmp_path / "s").mkdir()
    (tmp_path / "s" / "x").write_text("1")
    with pytest.raises(SessionExistsError):
        simulate(PipelineConfig.from_dict(mini_config()), tmp_path / "s")
