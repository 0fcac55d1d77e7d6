import json
import math

import pytest

from memmodel import Detection
from runlog import (
    ConfigError,
    LogFormatError,
    RunManifest,
    dump_record,
    finite_or_none,
    load_run_config,
    load_yaml,
    manifest_path,
    read_event_log,
    read_jsonl,
    write_jsonl,
)

HEADER = {
    "record": "header",
    "kind": "simulate",
    "plan": {"pattern": "0xFF", "device": {"capacity_bytes": 4096}},
}


def test_shipped_configs_load(configs_dir):
    for path in sorted(configs_dir.glob("*.yaml")):
        assert isinstance(load_run_config(path), dict)


def test_unknown_section_reports_its_line(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1\n# comment\nbogus:\n  a: 1\n")
    with pytest.raises(ConfigError) as exc:
        load_run_config(path)
    assert exc.value.line_no == 3
    assert "bogus" in str(exc.value)


def test_section_must_be_a_mapping(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1\ndevice: t41p_1gb\n")
    with pytest.raises(ConfigError) as exc:
        load_run_config(path)
    assert exc.value.line_no == 2


@pytest.mark.parametrize("text, line_no, key", [
    ("device:\n  preset: t41p_1gb\nduration_s: abc\n", 3, "duration_s"),
    ("seed: x\n", 1, "seed"),
    ("seed: 1.5\n", 1, "seed"),
    ("seed: 1\ncampaign:\n  fixture: suid_ping\n  trials: many\n", 4, "campaign.trials"),
    ("shield:\n  lead_thickness_mm: true\n", 2, "shield.lead_thickness_mm"),
    ("scan:\n  mode: live\n  region_bytes: 4 KiB\n", 3, "scan.region_bytes"),
])
def test_numeric_keys_must_hold_numbers(tmp_path, text, line_no, key):
    path = tmp_path / "run.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=key) as exc:
        load_run_config(path)
    assert exc.value.line_no == line_no


def test_bad_number_line_is_found_inside_its_own_section(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 1\nscan:\n  region_bytes: 4096\ndevice:\n  preset: t41p_1gb\n  region_bytes: big\n")
    with pytest.raises(ConfigError, match="device.region_bytes") as exc:
        load_run_config(path)
    assert exc.value.line_no == 6


def test_yaml_syntax_error_has_a_line(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("seed: 1\ndevice:\n  preset: [t41p\n")
    with pytest.raises(ConfigError) as exc:
        load_yaml(path)
    assert exc.value.line_no is not None


def test_yaml_top_level(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_yaml(path)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_yaml(empty) == {}


def test_missing_config(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "nope.yaml")


# ─────────────────────────────────────────────
# JSON Lines
# ─────────────────────────────────────────────

def test_non_finite_numbers_are_refused():
    with pytest.raises(ValueError):
        dump_record({"x": math.inf})
    assert finite_or_none(math.inf) is None
    assert finite_or_none(2.5) == 2.5
    assert finite_or_none(None) is None


def test_write_and_read_lines(tmp_path):
    path = tmp_path / "sub" / "log.jsonl"
    assert write_jsonl(path, [HEADER, {"record": "summary", "flips": 0}]) == 2
    lines = path.read_text().splitlines()
    assert json.loads(lines[0])["kind"] == "simulate"
    recs = read_jsonl(path)
    assert [r["_line"] for r in recs] == [1, 2]


def test_bad_json_line_number(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text(json.dumps(HEADER) + "\n{not json\n")
    with pytest.raises(LogFormatError) as exc:
        read_jsonl(path)
    assert exc.value.line_no == 2


def test_record_field_required(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text('{"t_s": 1}\n')
    with pytest.raises(LogFormatError, match="record"):
        read_jsonl(path)


def test_event_log_parsing(tmp_path):
    path = tmp_path / "log.jsonl"
    flip = {"record": "flip", "t_s": 1.0, "byte_offset": 5, "bit_index": 2,
            "direction": "one_to_zero", "detected": "detected", "detected_at_s": 3.0}
    write_jsonl(path, [HEADER, flip, {"record": "summary", "flips": 1}])
    log = read_event_log(path)
    assert log.kind == "simulate"
    assert log.summary == {"record": "summary", "flips": 1}
    (ev,) = log.events()
    assert ev.detected is Detection.DETECTED and ev.detected_at_s == 3.0


def test_event_log_needs_header_first(tmp_path):
    path = tmp_path / "log.jsonl"
    write_jsonl(path, [{"record": "summary"}, HEADER])
    with pytest.raises(LogFormatError, match="header"):
        read_event_log(path)


def test_event_log_unknown_record(tmp_path):
    path = tmp_path / "log.jsonl"
    write_jsonl(path, [HEADER, {"record": "gossip"}])
    with pytest.raises(LogFormatError) as exc:
        read_event_log(path)
    assert exc.value.line_no == 2


def test_bad_flip_record_reports_its_line(tmp_path):
    path = tmp_path / "log.jsonl"
    flip = {"record": "flip", "t_s": 1.0, "byte_offset": 5000, "bit_index": 2}
    write_jsonl(path, [HEADER, {"record": "flip", "t_s": 0.5, "byte_offset": 1, "bit_index": 0}, flip])
    with pytest.raises(LogFormatError) as exc:
        read_event_log(path).events()
    assert exc.value.line_no == 3


# ─────────────────────────────────────────────
# manifests
# ─────────────────────────────────────────────

def test_manifest_path():
    assert manifest_path("runs/sim_1.jsonl").name == "sim_1.jsonl.manifest.json"


def test_manifest_round_trip(tmp_path):
    m = RunManifest(subcommand="simulate", config={"seed": 3, "device": {"preset": "t41p_1gb"}},
                    seed=3, outputs={"primary": "x.jsonl"}).finish(0)
    path = m.write(tmp_path / "x.jsonl.manifest.json")
    loaded = RunManifest.load(path)
    assert loaded == m
    assert loaded.finished_at is not None and loaded.exit_code == 0
    assert len(loaded.run_id) == 12


def test_manifest_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunManifest.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"subcommand": "simulate", "colour": "red"}')
    with pytest.raises(ConfigError, match="malformed"):
        RunManifest.load(bad)
