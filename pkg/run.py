#!/usr/bin/env python3
"""
Entry point for fallout.

Usage:
    python run.py simulate --config CFG [--seed N] [--out PATH] [--preset NAME]
    python run.py scan --config CFG [--mode live|replay] [--self-test]
    python run.py estimate --config CFG
    python run.py campaign [--config CFG] [--fixture NAME] [--spray F] [--trials N] [--seed N]
    python run.py report LOG [LOG ...] [--out PATH] [--xlsx PATH]
    python run.py pipeline [--seed N] [--trials N]   - simulate → scan → campaign → report
    python run.py replay MANIFEST                     - re-run a manifest into its outputs
    python run.py history                             - registered runs

Exit codes: 0 ok, 1 live scan found flips, 2 config/usage, 3 environment.
"""

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(name)s - %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger("CLI")

import config  # noqa: E402
import db as _db  # noqa: E402
import pipeline  # noqa: E402
from errors import FalloutError  # noqa: E402
from memmodel import RegionError  # noqa: E402
from report import element_totals, format_table, save_to_excel, summarize_logs, table_records  # noqa: E402
from runlog import ConfigError, RunManifest, load_run_config, manifest_path, write_jsonl  # noqa: E402

EXIT_OK, EXIT_DETECTIONS, EXIT_CONFIG, EXIT_ENVIRONMENT = 0, 1, 2, 3


# ─────────────────────────────────────────────
# Executors: (config snapshot, seed, out) → (exit code, registry payload)
# Shared by the subcommands and by replay.
# ─────────────────────────────────────────────

def _exec_simulate(cfg: dict, seed: int, out: Path):
    res = pipeline.simulate(cfg, seed, out)
    s = res["summary"]
    if s.get("note"):
        print(f"0 flips ({s['note']})")
    else:
        spf = s["expected_seconds_per_flip"]
        print(f"{s['flips']} flips (expected {s['expected_flips']:.2f}, "
              f"{spf:.1f} s per flip)" if spf is not None else f"{s['flips']} flips")
    return EXIT_OK, {"events": res["events"]}


def _exec_scan(cfg: dict, seed: int, out: Path):
    report, header = pipeline.scan(cfg, out)
    print(json.dumps(report.summary()))
    if header["mode"] == "live" and report.detected:
        logger.warning("Live scan detected %d flipped bit(s)", len(report.detected))
        return EXIT_DETECTIONS, {"events": report.detected}
    return EXIT_OK, {"events": report.detected + report.missed}


def _exec_estimate(cfg: dict, seed: int, out: Path):
    rec = pipeline.estimate(cfg)
    rows = [
        ("scenario", rec["scenario"]),
        ("P(hit)", f"{rec['p_hit']:.4f}"),
        ("expected flips", f"{rec['expected_flips']:.3f}"),
        ("sensitive fraction", f"{rec['sensitive_fraction']:.3e}"),
    ]
    if "seconds_per_flip" in rec:
        spf = rec["seconds_per_flip"]
        rows.append(("seconds per flip", "inf" if spf is None else f"{spf:.1f}"))
    for k, v in rows:
        print(f"{k:<20} {v}")
    print(json.dumps(rec))
    write_jsonl(out, [rec])
    return EXIT_OK, {}


def _exec_campaign(cfg: dict, seed: int, out: Path):
    result = pipeline.campaign(cfg.get("campaign", {}), seed, out)
    print(json.dumps(result.summary()))
    return EXIT_OK, {"campaign": {"summary": result.summary(), "fixture": result.fixture,
                                  "spray_fraction": result.spray_fraction}}


EXECUTORS = {
    "simulate": _exec_simulate,
    "scan": _exec_scan,
    "estimate": _exec_estimate,
    "campaign": _exec_campaign,
}


def _run_recorded(subcommand: str, cfg: dict, seed: int, out: Path) -> int:
    manifest = RunManifest(subcommand=subcommand, config=copy.deepcopy(cfg), seed=seed,
                           outputs={"primary": str(out)})
    code, payload = EXECUTORS[subcommand](cfg, seed, out)
    manifest.finish(code).write(manifest_path(out))
    _db.register_run(manifest, events=payload.get("events"), campaign=payload.get("campaign"))
    return code


def _default_out(args, name: str) -> Path:
    return Path(args.out) if args.out else config.OUTPUT_DIR / f"{name}_{args.seed}.jsonl"


def _load_config(args) -> dict:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "preset", None):
        cfg["device"] = {**(cfg.get("device") or {}), "preset": args.preset}
    return cfg


# ─────────────────────────────────────────────
# Subcommands
# ─────────────────────────────────────────────

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", config.DEFAULT_SEED))
    args.seed = seed
    return _run_recorded("simulate", cfg, seed, _default_out(args, "simulate"))


def cmd_scan(args) -> int:
    cfg = _load_config(args)
    scan_cfg = dict(cfg.get("scan") or {})
    if args.mode:
        scan_cfg["mode"] = args.mode
    if args.events:
        scan_cfg["events"] = args.events
    if args.self_test:
        scan_cfg["self_test"] = True
    cfg["scan"] = scan_cfg
    args.seed = args.seed if args.seed is not None else config.DEFAULT_SEED
    return _run_recorded("scan", cfg, args.seed, _default_out(args, f"scan_{scan_cfg.get('mode', 'replay')}"))


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    if args.scenario:
        cfg["scenario"] = args.scenario
    args.seed = args.seed if args.seed is not None else config.DEFAULT_SEED
    return _run_recorded("estimate", cfg, args.seed, _default_out(args, "estimate"))


def cmd_campaign(args) -> int:
    cfg = _load_config(args)
    camp = dict(cfg.get("campaign") or {})
    if args.params:
        camp["params"] = args.params
    if args.fixture:
        camp["fixture"] = args.fixture
    if args.spray is not None:
        camp["spray_fraction"] = args.spray
    if args.trials is not None:
        camp["trials"] = args.trials
    if args.keep_trials:
        camp["keep_trials"] = True
    cfg["campaign"] = camp
    seed = args.seed if args.seed is not None else int(cfg.get("seed", config.DEFAULT_SEED))
    args.seed = seed
    return _run_recorded("campaign", cfg, seed, _default_out(args, "campaign"))


def cmd_report(args) -> int:
    table = summarize_logs(args.logs)
    print(format_table(table))
    if not table.empty:
        print()
        print(element_totals(table).to_string(index=False))

    out = Path(args.out) if args.out else config.OUTPUT_DIR / "report.jsonl"
    header = {"record": "header", "kind": "report", "logs": [str(p) for p in args.logs]}
    write_jsonl(out, [header, *table_records(table)])
    outputs = {"primary": str(out)}
    if args.xlsx:
        save_to_excel(table, args.xlsx, "Flips")
        outputs["xlsx"] = str(args.xlsx)
    RunManifest(subcommand="report", config={"logs": list(args.logs)}, seed=None,
                outputs=outputs).finish(EXIT_OK).write(manifest_path(out))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    seed = args.seed if args.seed is not None else config.DEFAULT_SEED
    res = pipeline.run_pipeline(seed=seed, out_dir=Path(args.out) if args.out else None,
                                trials=args.trials or 1000)
    print(format_table(res["table"]))
    print(json.dumps(res["campaign"]))
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = RunManifest.load(args.manifest)
    if manifest.subcommand not in EXECUTORS:
        raise ConfigError(f"cannot replay a {manifest.subcommand!r} run", path=args.manifest)
    if manifest.tool_version != config.TOOL_VERSION:
        logger.warning("Manifest written by %s, replaying with %s",
                       manifest.tool_version, config.TOOL_VERSION)
    out = Path(manifest.outputs["primary"])
    code, _ = EXECUTORS[manifest.subcommand](manifest.config, manifest.seed, out)
    logger.info("Replayed %s run %s into %s", manifest.subcommand, manifest.run_id, out)
    return code


def cmd_history(args) -> int:
    runs = _db.load_runs(args.subcommand, limit=args.limit)
    if runs.empty:
        print("(no registered runs)")
    else:
        print(runs[["run_id", "subcommand", "seed", "started_at", "exit_code"]].to_string(index=False))
    return EXIT_OK


# ─────────────────────────────────────────────
# main
# ─────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="fallout - radiation-induced bit-flip toolkit")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command")

    def common(p, seed=True, out=True):
        p.add_argument("--config", help="YAML run config")
        if seed:
            p.add_argument("--seed", type=int, help=f"RNG seed (default {config.DEFAULT_SEED})")
        if out:
            p.add_argument("--out", help="Primary output path (JSON Lines)")

    p_sim = sub.add_parser("simulate", help="Simulate one irradiation session")
    common(p_sim)
    p_sim.add_argument("--preset", help="Device preset overriding the config")

    p_scan = sub.add_parser("scan", help="Scan loop: live memory or replay of an event log")
    common(p_scan)
    p_scan.add_argument("--mode", choices=["live", "replay"])
    p_scan.add_argument("--events", help="Event log to replay")
    p_scan.add_argument("--self-test", action="store_true", help="Flip one bit from a writer thread")

    p_est = sub.add_parser("estimate", help="Spray hit probability for a scenario")
    common(p_est)
    p_est.add_argument("--scenario", help="Scenario name from the scenarios file")
    p_est.add_argument("--preset", help="Device preset for seconds-per-flip")

    p_camp = sub.add_parser("campaign", help="Monte Carlo flip campaign on a toy machine")
    common(p_camp)
    p_camp.add_argument("--fixture", choices=["suid_ping", "bare_metal_firmware"])
    p_camp.add_argument("--params", help="Named fixture parameter set")
    p_camp.add_argument("--spray", type=float, help="Spray fraction of allocatable frames")
    p_camp.add_argument("--trials", type=int)
    p_camp.add_argument("--keep-trials", action="store_true", help="Write per-trial records")

    p_rep = sub.add_parser("report", help="Aggregate run logs into a flip table")
    p_rep.add_argument("logs", nargs="*")
    p_rep.add_argument("--out", help="Table as JSON Lines (default runs/report.jsonl)")
    p_rep.add_argument("--xlsx", help="Also export the table to Excel")

    p_pipe = sub.add_parser("pipeline", help="End-to-end Cobalt session → scan → campaign")
    p_pipe.add_argument("--seed", type=int)
    p_pipe.add_argument("--trials", type=int)
    p_pipe.add_argument("--out", help="Output directory")

    p_rpl = sub.add_parser("replay", help="Re-execute a run manifest")
    p_rpl.add_argument("manifest")

    p_hist = sub.add_parser("history", help="List registered runs")
    p_hist.add_argument("--subcommand")
    p_hist.add_argument("--limit", type=int, default=20)

    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "scan": cmd_scan,
    "estimate": cmd_estimate,
    "campaign": cmd_campaign,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
    "replay": cmd_replay,
    "history": cmd_history,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    handler = COMMANDS.get(args.command)
    if handler is None:
        parser.print_help()
        return EXIT_CONFIG

    try:
        return handler(args)
    except RegionError as e:
        logger.error("%s", e)
        if e.hint:
            print(f"error: {e}\nhint: {e.hint}", file=sys.stderr)
        else:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except FalloutError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
