"""
Pipeline orchestrator: turns run configs into simulation, scan, estimate
and campaign artifacts, and chains them end to end

    calibrate -> simulate one Cobalt session -> replay the scan loop over it
              -> map the session's flips onto the toy machine -> report.

run.py owns argument parsing, manifests and exit codes; everything here
returns data and writes only the artifact paths it is given.
"""

import logging
from datetime import datetime
from pathlib import Path

import config
import db as _db
from exploitlab.campaign import CampaignResult, FlipDistribution, run_campaign
from exploitlab.machine import PageTag, build_fixture
from exploitlab.spray import (
    ScenarioError,
    SprayScenario,
    expected_flips,
    load_fixture_params,
    load_scenarios,
    scenario_from_config,
    spray_hit_probability,
)
from fluxsim import (
    ExposurePlan,
    FlipRateModel,
    calibrate,
    expected_flip_count,
    expected_seconds_per_flip,
    load_observations,
    simulate_exposure,
)
from memmodel import TestPattern, make_device
from physics import ShieldSpec
from report import element_totals, export_observation_logs, save_to_excel, summarize_logs
from runlog import ConfigError, RunManifest, finite_or_none, read_event_log, write_jsonl
from scanner import ScanConfig, ScanReport, SelfTest, live_scan, run_session

log = logging.getLogger("PIPELINE")

SPRAYED_PARAMS = "suid_ping_sprayed"


# ─────────────────────────────────────────────
# Config → domain objects
# ─────────────────────────────────────────────

def _require(cfg: dict, key: str, section: str = ""):
    where = f"{section}." if section else ""
    if key not in cfg:
        raise ConfigError(f"missing required key '{where}{key}'")
    return cfg[key]


def _number(kind, value, name: str):
    try:
        if isinstance(value, bool):
            raise TypeError(name)
        return kind(value)
    except (TypeError, ValueError):
        expected = "an integer" if kind is int else "a number"
        raise ConfigError(f"{name} must be {expected}, got {value!r}") from None


def model_from_config(cfg: dict) -> FlipRateModel:
    path = cfg.get("calibration")
    return calibrate(load_observations(Path(path) if path else None))


def plan_from_config(cfg: dict, seed: int | None = None) -> ExposurePlan:
    source = cfg.get("source") or {}
    device_cfg = dict(_require(cfg, "device"))
    preset = device_cfg.pop("preset", None)
    region = device_cfg.pop("region_bytes", None)
    shield = cfg.get("shield") or {}
    try:
        shield_spec = ShieldSpec(**shield)
    except TypeError as e:
        raise ConfigError(f"shield: {e}") from None
    return ExposurePlan(
        isotope=source.get("isotope"),
        device=make_device(preset, **device_cfg),
        pattern=TestPattern.parse(cfg.get("pattern", "0xFF")),
        duration_s=_number(float, _require(cfg, "duration_s"), "duration_s"),
        seed=_number(int, seed if seed is not None else cfg.get("seed", config.DEFAULT_SEED), "seed"),
        shield=shield_spec,
        region_bytes=region,
        include_ambient=bool(cfg.get("ambient", False)),
        source_age_s=_number(float, source.get("age_s", 0.0), "source.age_s"),
        distance_cm=source.get("distance_cm"),
    )


def scan_config_from(scan: dict, plan: dict | None = None) -> ScanConfig:
    plan = plan or {}
    self_test = scan.get("self_test")
    if self_test is True:
        self_test = {"byte_offset": 0, "bit_index": 0}
    return ScanConfig(
        region_bytes=_number(int, scan.get("region_bytes") or _require(plan, "region_bytes", "plan"),
                             "scan.region_bytes"),
        pattern=TestPattern.parse(scan.get("pattern") or plan.get("pattern") or "0xFF"),
        total_duration_s=_number(float, scan.get("duration_s") or _require(plan, "duration_s", "plan"),
                                 "scan.duration_s"),
        read_rate_bytes_per_s=_number(float, scan.get("read_rate_bytes_per_s", config.SCAN_READ_RATE_BYTES_PER_S),
                                      "scan.read_rate_bytes_per_s"),
        rewrite_on_detect=bool(scan.get("rewrite_on_detect", False)),
        lock_pages=bool(scan.get("lock_pages", True)),
        self_test=SelfTest(**self_test) if self_test else None,
    )


def scenario_from(cfg: dict) -> SprayScenario:
    raw = _require(cfg, "scenario")
    if isinstance(raw, str):
        scenarios = load_scenarios(cfg.get("scenarios_file"))
        if raw not in scenarios:
            raise ScenarioError(f"unknown scenario {raw!r}; known: {', '.join(sorted(scenarios))}")
        return scenarios[raw]
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a name or a mapping")
    return scenario_from_config(raw)


def campaign_from_config(camp: dict):
    """(machine, distribution, trials) from a campaign section."""
    params = dict(camp)
    if "params" in params:
        named = load_fixture_params()
        name = params.pop("params")
        if name not in named:
            raise ScenarioError(f"unknown fixture parameter set {name!r}")
        params = {**named[name], **params}
    machine = build_fixture(params.get("fixture", "suid_ping"),
                            _number(float, params.get("spray_fraction", 0.0), "campaign.spray_fraction"))
    tags = params.get("tags")
    try:
        tag_set = frozenset(PageTag[str(t).upper()] for t in tags) if tags else None
    except KeyError as e:
        raise ConfigError(f"campaign.tags: unknown page tag {e}") from None
    dist = FlipDistribution(
        tags=tag_set,
        flips_per_trial=_number(int, params.get("flips_per_trial", 1), "campaign.flips_per_trial"),
        poisson_mean=(None if params.get("poisson_mean") is None
                      else _number(float, params["poisson_mean"], "campaign.poisson_mean")),
    )
    return machine, dist, _number(int, params.get("trials", 1000), "campaign.trials")


# ═════════════════════════════════════════════
# 명령 단위 작업
# ═════════════════════════════════════════════

def simulate(cfg: dict, seed: int | None, out: Path) -> dict:
    model = model_from_config(cfg)
    plan = plan_from_config(cfg, seed)
    events = simulate_exposure(plan, model)
    expected = expected_flip_count(model, plan)
    summary = {
        "record": "summary",
        "flips": len(events),
        "expected_flips": expected,
        "expected_seconds_per_flip": finite_or_none(expected_seconds_per_flip(model, plan)),
    }
    if expected == 0:
        summary["note"] = "below susceptibility threshold"
    header = {
        "record": "header",
        "kind": "simulate",
        "tool_version": config.TOOL_VERSION,
        "seed": plan.seed,
        "plan": plan.to_record(),
        "model": model.to_record(),
    }
    write_jsonl(out, [header, *({"record": "flip", **e.to_record()} for e in events), summary])
    return {"plan": plan, "events": events, "summary": summary}


def scan(cfg: dict, out: Path) -> tuple[ScanReport, dict]:
    scan_cfg = _require(cfg, "scan")
    mode = scan_cfg.get("mode", "replay")
    if mode == "replay":
        source = read_event_log(_require(scan_cfg, "events", "scan"))
        sc = scan_config_from(scan_cfg, source.plan)
        report = run_session(sc, source.events())
        header = {"record": "header", "kind": "scan", "mode": "replay",
                  "source_log": str(source.path), "plan": source.plan}
    elif mode == "live":
        sc = scan_config_from(scan_cfg)
        report = live_scan(sc)
        header = {"record": "header", "kind": "scan", "mode": "live"}
    else:
        raise ConfigError(f"scan.mode must be 'live' or 'replay', got {mode!r}")

    header["scan"] = {
        "region_bytes": sc.region_bytes,
        "pattern": str(sc.pattern),
        "total_duration_s": sc.total_duration_s,
        "read_rate_bytes_per_s": sc.read_rate_bytes_per_s,
        "rewrite_on_detect": sc.rewrite_on_detect,
    }
    write_jsonl(out, [header, *report.to_records()])
    return report, header


def estimate(cfg: dict) -> dict:
    s = scenario_from(cfg)
    rec = {
        "record": "estimate",
        "scenario": s.name,
        "p_hit": spray_hit_probability(s),
        "expected_flips": expected_flips(s),
        "sensitive_fraction": s.sensitive_fraction,
        "refresh_interval_ms": s.refresh_interval_ms,
    }
    if "device" in cfg and "duration_s" in cfg:
        model = model_from_config(cfg)
        rec["seconds_per_flip"] = finite_or_none(expected_seconds_per_flip(model, plan_from_config(cfg)))
    return rec


def campaign(camp: dict, seed: int, out: Path, trials: int | None = None) -> CampaignResult:
    machine, dist, n = campaign_from_config(camp)
    result = run_campaign(machine, dist, trials or n, seed=seed,
                          keep_trials=bool(camp.get("keep_trials", False)), progress=True)
    write_jsonl(out, result.to_records())
    return result


# ═════════════════════════════════════════════
# End-to-end
# ═════════════════════════════════════════════

COBALT_SESSION = {
    "source": {"isotope": "Co-60"},
    "device": {"preset": "t41p_1gb"},
    "pattern": "0xFF",
    "duration_s": 1200,
}


def run_pipeline(seed: int = config.DEFAULT_SEED, out_dir: Path | None = None,
                 trials: int = 1000, xlsx: bool = True, register: bool = True) -> dict:
    """Cobalt session -> scan replay -> toy-machine campaign -> report.

    The campaign draws a Poisson number of flips per trial with the
    session's expected count, scattered over the toy machine.
    """
    start = datetime.now()
    out_dir = Path(out_dir or config.OUTPUT_DIR / f"pipeline_{seed}")
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("Pipeline started at %s (seed %d) -> %s", start.strftime("%Y-%m-%d %H:%M:%S"), seed, out_dir)

    # ── Step 1: simulate ──
    sim_path = out_dir / "session.jsonl"
    sim = simulate(COBALT_SESSION, seed, sim_path)

    # ── Step 2: scan replay ──
    scan_path = out_dir / "scan.jsonl"
    scan_report, _ = scan({"scan": {"mode": "replay", "events": str(sim_path)}}, scan_path)

    # ── Step 3: campaign ──
    camp_path = out_dir / "campaign.jsonl"
    camp_cfg = {"params": SPRAYED_PARAMS, "poisson_mean": sim["summary"]["expected_flips"]}
    result = campaign(camp_cfg, seed, camp_path, trials)

    # ── Step 4: report ──
    obs_paths = export_observation_logs(load_observations(), out_dir / "observed")
    table = summarize_logs([*obs_paths, sim_path])
    if xlsx:
        save_to_excel(table, out_dir / "report.xlsx", "Flips")

    manifest = RunManifest(
        subcommand="pipeline",
        config={"seed": seed, "trials": trials, "session": COBALT_SESSION, "campaign": camp_cfg},
        seed=seed,
        outputs={"simulate": str(sim_path), "scan": str(scan_path), "campaign": str(camp_path)},
    ).finish(0)
    manifest.write(out_dir / "pipeline.manifest.json")
    if register:
        _db.register_run(manifest, events=sim["events"],
                         campaign={"summary": result.summary(), "fixture": result.fixture,
                                   "spray_fraction": result.spray_fraction})

    summary = {
        "flips": sim["summary"]["flips"],
        "detected": len(scan_report.detected),
        "missed": len(scan_report.missed),
        "campaign": result.summary(),
        "table": table,
        "totals": element_totals(table),
        "manifest": manifest,
    }
    log.info("Pipeline finished in %s: %d flips, %d detected, escalation %d/%d, crash %d/%d",
             datetime.now() - start, summary["flips"], summary["detected"],
             result.summary()["escalation"], trials, result.summary()["crash"], trials)
    return summary
