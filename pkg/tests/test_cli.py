import json
from pathlib import Path

import pytest

import config
import run
from exploitlab.machine import build_fixture
from exploitlab.spray import scenario_for_machine, spray_hit_probability
from runlog import RunManifest, manifest_path, read_event_log, read_jsonl


@pytest.fixture
def cobalt_cfg(configs_dir):
    return str(configs_dir / "cobalt_t41p.yaml")


def test_no_command_is_a_usage_error():
    assert run.main([]) == run.EXIT_CONFIG


def test_simulate(tmp_path, cobalt_cfg, capsys):
    out = tmp_path / "sim.jsonl"
    assert run.main(["simulate", "--config", cobalt_cfg, "--out", str(out)]) == run.EXIT_OK
    log = read_event_log(out)
    assert log.header["seed"] == 20231101
    assert "flips" in capsys.readouterr().out

    manifest = RunManifest.load(manifest_path(out))
    assert manifest.subcommand == "simulate"
    assert manifest.exit_code == 0
    assert manifest.outputs["primary"] == str(out)


def test_simulate_default_output_location(cobalt_cfg):
    assert run.main(["simulate", "--config", cobalt_cfg, "--seed", "4"]) == run.EXIT_OK
    assert (config.OUTPUT_DIR / "simulate_4.jsonl").exists()


def test_simulate_with_modern_preset(tmp_path, cobalt_cfg, capsys):
    out = tmp_path / "sim.jsonl"
    assert run.main(["simulate", "--config", cobalt_cfg, "--preset", "rpi4_4gb", "--out", str(out)]) == 0
    assert "below susceptibility threshold" in capsys.readouterr().out
    assert read_event_log(out).flips == []


def test_replay_reproduces_the_output(tmp_path, cobalt_cfg):
    out = tmp_path / "sim.jsonl"
    run.main(["simulate", "--config", cobalt_cfg, "--seed", "77", "--out", str(out)])
    original = out.read_bytes()
    out.unlink()
    assert run.main(["replay", str(manifest_path(out))]) == run.EXIT_OK
    assert out.read_bytes() == original


def test_replay_refuses_reports(tmp_path):
    m = RunManifest(subcommand="report", config={}, seed=None, outputs={"primary": "x"})
    path = m.write(tmp_path / "x.manifest.json")
    assert run.main(["replay", str(path)]) == run.EXIT_CONFIG


def test_unknown_config_section(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("device:\n  preset: t41p_1gb\nflux_capacitor: 1\n")
    assert run.main(["simulate", "--config", str(cfg)]) == run.EXIT_CONFIG
    assert "bad.yaml:3" in capsys.readouterr().err


def test_unknown_preset(tmp_path, cobalt_cfg):
    assert run.main(["simulate", "--config", cobalt_cfg, "--preset", "pdp11"]) == run.EXIT_CONFIG


def test_scan_replay(tmp_path, cobalt_cfg, capsys):
    sim = tmp_path / "sim.jsonl"
    run.main(["simulate", "--config", cobalt_cfg, "--out", str(sim)])
    capsys.readouterr()
    out = tmp_path / "scan.jsonl"
    code = run.main(["scan", "--mode", "replay", "--events", str(sim), "--out", str(out)])
    assert code == run.EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["detected"] + summary["missed"] == len(read_event_log(sim).flips)


def test_scan_live_too_large_is_an_environment_error(tmp_path, capsys):
    cfg = tmp_path / "huge.yaml"
    cfg.write_text(f"scan:\n  mode: live\n  region_bytes: {1 << 60}\n  duration_s: 1\n  lock_pages: false\n")
    assert run.main(["scan", "--config", str(cfg), "--out", str(tmp_path / "s.jsonl")]) == run.EXIT_ENVIRONMENT
    assert "hint:" in capsys.readouterr().err


@pytest.mark.live
def test_scan_live_self_test_exits_with_detections(tmp_path):
    cfg = tmp_path / "live.yaml"
    cfg.write_text("scan:\n  mode: live\n  region_bytes: 4096\n  duration_s: 0.3\n  lock_pages: false\n")
    out = tmp_path / "live.jsonl"
    assert run.main(["scan", "--config", str(cfg), "--self-test", "--out", str(out)]) == run.EXIT_DETECTIONS
    flips = [r for r in read_jsonl(out) if r["record"] == "flip"]
    assert [(f["byte_offset"], f["bit_index"]) for f in flips] == [(0, 0)]


def test_estimate(tmp_path, configs_dir, capsys):
    out = tmp_path / "est.jsonl"
    cfg = str(configs_dir / "estimate_cobalt.yaml")
    assert run.main(["estimate", "--config", cfg, "--scenario", "rowhammer_spray", "--out", str(out)]) == 0
    (rec,) = read_jsonl(out)
    assert rec["scenario"] == "rowhammer_spray"
    assert rec["p_hit"] == pytest.approx(0.3057, abs=5e-4)
    assert "P(hit)" in capsys.readouterr().out


def test_campaign(tmp_path):
    out = tmp_path / "camp.jsonl"
    code = run.main(["campaign", "--fixture", "bare_metal_firmware", "--trials", "100",
                     "--keep-trials", "--out", str(out)])
    assert code == run.EXIT_OK
    recs = read_jsonl(out)
    assert recs[0]["fixture"] == "bare_metal_firmware"
    assert sum(r["record"] == "trial" for r in recs) == 100
    assert recs[-1]["trials"] == 100


def test_campaign_unknown_params(tmp_path):
    assert run.main(["campaign", "--params", "nope", "--out", str(tmp_path / "c.jsonl")]) == run.EXIT_CONFIG


def test_pipeline_command(tmp_path, capsys):
    assert run.main(["pipeline", "--seed", "3", "--trials", "50", "--out", str(tmp_path)]) == run.EXIT_OK
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["trials"] == 50
    assert RunManifest.load(tmp_path / "pipeline.manifest.json").subcommand == "pipeline"


def test_report_with_excel(tmp_path, cobalt_cfg, capsys):
    sim = tmp_path / "sim.jsonl"
    run.main(["simulate", "--config", cobalt_cfg, "--out", str(sim)])
    capsys.readouterr()
    xlsx = tmp_path / "report.xlsx"
    assert run.main(["report", str(sim), "--xlsx", str(xlsx)]) == run.EXIT_OK
    assert "Co-60" in capsys.readouterr().out
    assert xlsx.exists()
    manifest = RunManifest.load(manifest_path(config.OUTPUT_DIR / "report.jsonl"))
    assert manifest.outputs["xlsx"] == str(xlsx)


def test_history_with_registration(tmp_path, cobalt_cfg, monkeypatch, capsys):
    assert run.main(["history"]) == 0
    assert "no registered runs" in capsys.readouterr().out

    monkeypatch.setattr(config, "REGISTER_RUNS", True)
    run.main(["simulate", "--config", cobalt_cfg, "--out", str(tmp_path / "sim.jsonl")])
    capsys.readouterr()
    assert run.main(["history", "--subcommand", "simulate"]) == 0
    manifest = RunManifest.load(manifest_path(tmp_path / "sim.jsonl"))
    assert manifest.run_id in capsys.readouterr().out


def test_missing_config_file(tmp_path, capsys):
    assert run.main(["simulate", "--config", str(tmp_path / "absent.yaml")]) == run.EXIT_CONFIG
    assert "file not found" in capsys.readouterr().err


def test_report_names_the_bad_line(tmp_path, cobalt_cfg, capsys):
    sim = tmp_path / "sim.jsonl"
    run.main(["simulate", "--config", cobalt_cfg, "--out", str(sim)])
    lines = sim.read_text().splitlines()
    lines[1] = "{not json"
    sim.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert run.main(["report", str(sim)]) == run.EXIT_CONFIG
    assert f"{sim}:2:" in capsys.readouterr().err


def test_report_without_logs(capsys):
    assert run.main(["report"]) == run.EXIT_OK
    assert "(no runs)" in capsys.readouterr().out


@pytest.mark.parametrize("argv, text, where", [
    (["simulate"], "source:\n  isotope: Co-60\ndevice:\n  preset: t41p_1gb\nduration_s: abc\n", "bad.yaml:5:"),
    (["simulate"], "device:\n  preset: t41p_1gb\nduration_s: 60\nseed: x\n", "bad.yaml:4:"),
    (["campaign"], "campaign:\n  fixture: suid_ping\n  trials: x\n", "bad.yaml:3:"),
])
def test_non_numeric_config_value_is_a_config_error(tmp_path, capsys, argv, text, where):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    code = run.main([*argv, "--config", str(cfg), "--out", str(tmp_path / "o.jsonl")])
    assert code == run.EXIT_CONFIG
    assert where in capsys.readouterr().err


def test_report_always_writes_a_manifest(tmp_path, cobalt_cfg):
    sim = tmp_path / "sim.jsonl"
    run.main(["simulate", "--config", cobalt_cfg, "--out", str(sim)])
    before = set(tmp_path.glob("*.manifest.json"))
    out = tmp_path / "table.jsonl"
    assert run.main(["report", str(sim), "--out", str(out)]) == run.EXIT_OK
    assert set(tmp_path.glob("*.manifest.json")) - before == {manifest_path(out)}
    manifest = RunManifest.load(manifest_path(out))
    assert manifest.subcommand == "report"
    assert manifest.outputs == {"primary": str(out)}
    rows = [r for r in read_jsonl(out) if r["record"] == "row"]
    assert [r["Element"] for r in rows] == ["Co-60"]


def test_report_default_output_location(capsys):
    assert run.main(["report"]) == run.EXIT_OK
    assert RunManifest.load(manifest_path(config.OUTPUT_DIR / "report.jsonl")).exit_code == 0


def test_campaign_is_reproducible(tmp_path, configs_dir):
    cfg = str(configs_dir / "campaign_suid_ping.yaml")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert run.main(["campaign", "--config", cfg, "--trials", "300", "--seed", "11", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


# ─────────────────────────────────────────────
# golden outputs (see docs/formats.md for how they are produced)
# ─────────────────────────────────────────────

GOLDEN = Path(__file__).parent / "golden"
SIMULATE_GOLDEN = "simulate_cobalt_t41p.jsonl"
CAMPAIGN_GOLDEN = "campaign_suid_ping.jsonl"


def _golden(request, name: str, argv: list[str], verify) -> Path:
    """Checked-in reference output; with --bootstrap-golden a missing one is written once, after checks."""
    path = GOLDEN / name
    if path.exists():
        return path
    if not request.config.getoption("--bootstrap-golden"):
        pytest.fail(f"golden file tests/golden/{name} is missing; "
                    f"generate it with `pytest --bootstrap-golden -k golden`")
    assert run.main([*argv, "--out", str(path)]) == run.EXIT_OK
    try:
        verify(path)
    except AssertionError:
        path.unlink()
        manifest_path(path).unlink()
        raise
    return path


def _verify_simulate(path: Path):
    flips = read_event_log(path).summary["flips"]
    # Poisson(27) session
    assert abs(flips - 27) <= 5 * 27 ** 0.5


def _verify_campaign(path: Path):
    summary = read_jsonl(path)[-1]
    m = build_fixture("suid_ping", 0.005)
    n = summary["trials"]
    p = spray_hit_probability(scenario_for_machine(m, 1))
    assert abs(summary["escalation"] - n * p) <= 3 * (n * p * (1 - p)) ** 0.5 + 1


SIMULATE_ARGV = ["simulate", "--config", str(config.DATA_DIR / "configs" / "cobalt_t41p.yaml"),
                 "--seed", "20231101"]
CAMPAIGN_ARGV = ["campaign", "--config", str(config.DATA_DIR / "configs" / "campaign_suid_ping.yaml"),
                 "--trials", "10000", "--seed", "20231101"]


def test_simulate_matches_golden(request, tmp_path):
    golden = _golden(request, SIMULATE_GOLDEN, SIMULATE_ARGV, _verify_simulate)
    out = tmp_path / "sim.jsonl"
    run.main([*SIMULATE_ARGV, "--out", str(out)])
    assert out.read_bytes() == golden.read_bytes()
    assert RunManifest.load(manifest_path(golden)).seed == 20231101


@pytest.mark.slow
def test_campaign_matches_golden(request, tmp_path):
    golden = _golden(request, CAMPAIGN_GOLDEN, CAMPAIGN_ARGV, _verify_campaign)
    out = tmp_path / "camp.jsonl"
    run.main([*CAMPAIGN_ARGV, "--out", str(out)])
    assert out.read_bytes() == golden.read_bytes()
    assert RunManifest.load(manifest_path(golden)).subcommand == "campaign"
