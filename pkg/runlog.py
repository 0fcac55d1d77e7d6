# =========================================================
# runlog.py - run logs, run configs, manifests
# ---------------------------------------------------------
# Event log  (JSON Lines, one object per line, "record" discriminator):
#   {"record": "header", "kind": "simulate", ...}
#   {"record": "flip", "t_s": ..., "byte_offset": ..., ...}   x N
#   {"record": "summary", ...}
#
# Run config (YAML sections: source, device, shield, scan, scenario,
# campaign) and <out>.manifest.json, see docs/formats.md.
# =========================================================

import json
import logging
import math
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable

import yaml

import config
from errors import FalloutError
from memmodel import FlipEvent, TestPattern, flip_event_from_record

log = logging.getLogger("RUNLOG")

MANIFEST_SUFFIX = ".manifest.json"
CONFIG_SECTIONS = frozenset({
    "source", "device", "pattern", "duration_s", "seed", "shield", "ambient",
    "calibration", "scan", "scenario", "scenarios_file", "campaign", "out",
})
# (section, key) -> int or float; None is the top level
NUMERIC_KEYS = {
    (None, "duration_s"): float,
    (None, "seed"): int,
    ("source", "age_s"): float,
    ("source", "distance_cm"): float,
    ("device", "region_bytes"): int,
    ("shield", "lead_thickness_mm"): float,
    ("shield", "covered_start"): int,
    ("shield", "covered_end"): int,
    ("scan", "region_bytes"): int,
    ("scan", "duration_s"): float,
    ("scan", "read_rate_bytes_per_s"): float,
    ("campaign", "trials"): int,
    ("campaign", "spray_fraction"): float,
    ("campaign", "flips_per_trial"): int,
    ("campaign", "poisson_mean"): float,
}


class LogFormatError(FalloutError):
    def __init__(self, message: str, line_no: int | None = None, path: Path | str | None = None):
        if path and line_no:
            where = f"{path}:{line_no}: "
        elif line_no:
            where = f"line {line_no}: "
        else:
            where = f"{path}: " if path else ""
        super().__init__(f"{where}{message}")
        self.line_no = line_no
        self.path = path


class ConfigError(FalloutError):
    def __init__(self, message: str, line_no: int | None = None, path: Path | str | None = None):
        where = f"{path}:{line_no}: " if path and line_no else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")
        self.line_no = line_no
        self.path = path


# ─────────────────────────────────────────────
# YAML
# ─────────────────────────────────────────────

def load_yaml(path: Path | str) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("file not found", path=path) from None
    except OSError as e:
        raise ConfigError(f"cannot read: {e.strerror}", path=path) from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line_no = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(problem, line_no=line_no, path=path) from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping", line_no=1, path=path)
    return doc


def _key_line(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if line.split("#", 1)[0].rstrip().startswith(f"{key}:"):
            return i
    return None


def _nested_key_line(text: str, section: str | None, key: str) -> int | None:
    if section is None:
        return _key_line(text, key)
    start = _key_line(text, section)
    if start is None:
        return None
    for i, line in enumerate(text.splitlines()[start:], start + 1):
        body = line.split("#", 1)[0].rstrip()
        if body and not body[0].isspace():
            break
        if body.strip().startswith(f"{key}:"):
            return i
    return None


def _check_numbers(doc: dict, text: str, path: Path) -> None:
    for (section, key), kind in NUMERIC_KEYS.items():
        holder = doc if section is None else doc.get(section)
        if not isinstance(holder, dict) or holder.get(key) is None:
            continue
        value = holder[key]
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and kind is int:
            ok = float(value).is_integer()
        if not ok:
            name = f"{section}.{key}" if section else key
            expected = "an integer" if kind is int else "a number"
            raise ConfigError(f"{name} must be {expected}, got {value!r}",
                              line_no=_nested_key_line(text, section, key), path=path)


def load_run_config(path: Path | str) -> dict:
    """Parse a run config; unknown top-level sections are rejected with their line."""
    path = Path(path)
    doc = load_yaml(path)
    unknown = sorted(set(doc) - CONFIG_SECTIONS)
    if unknown:
        text = path.read_text(encoding="utf-8")
        raise ConfigError(f"unknown section {unknown[0]!r}", line_no=_key_line(text, unknown[0]),
                          path=path)
    for section in ("source", "device", "shield", "scan", "campaign"):
        if section in doc and not isinstance(doc[section], dict):
            text = path.read_text(encoding="utf-8")
            raise ConfigError(f"section {section!r} must be a mapping",
                              line_no=_key_line(text, section), path=path)
    _check_numbers(doc, path.read_text(encoding="utf-8"), path)
    log.debug("Loaded run config %s (%s)", path, ", ".join(sorted(doc)))
    return doc


# ─────────────────────────────────────────────
# JSON Lines
# ─────────────────────────────────────────────

def finite_or_none(x: float | None) -> float | None:
    if x is None or math.isfinite(x):
        return x
    return None


def dump_record(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, allow_nan=False)


def write_jsonl(path: Path | str, records: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(dump_record(rec))
            f.write("\n")
            n += 1
    log.info("Wrote %s (%d records)", path, n)
    return n


def read_jsonl(path: Path | str) -> list[dict]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise LogFormatError("log file not found", path=path) from None
    records = []
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise LogFormatError(f"invalid JSON ({e.msg})", line_no, path) from None
        if not isinstance(rec, dict) or "record" not in rec:
            raise LogFormatError("expected an object with a 'record' field", line_no, path)
        rec["_line"] = line_no
        records.append(rec)
    return records


@dataclass
class EventLog:
    path: Path
    header: dict
    flips: list[dict]
    summary: dict | None = None

    @property
    def kind(self) -> str:
        return self.header.get("kind", "")

    @property
    def plan(self) -> dict:
        return self.header.get("plan", {})

    def events(self) -> list[FlipEvent]:
        plan = self.plan
        try:
            pattern = TestPattern.parse(plan["pattern"])
            capacity = int(plan["device"]["capacity_bytes"])
        except (KeyError, TypeError) as e:
            raise LogFormatError(f"header lacks plan field {e}", 1, self.path) from None
        out = []
        for rec in self.flips:
            try:
                out.append(flip_event_from_record(rec, pattern, capacity))
            except FalloutError as e:
                raise LogFormatError(str(e), rec.get("_line"), self.path) from None
        return out


def read_event_log(path: Path | str) -> EventLog:
    path = Path(path)
    records = read_jsonl(path)
    if not records or records[0]["record"] != "header":
        raise LogFormatError("first record must be the header", 1, path)
    header = {k: v for k, v in records[0].items() if k != "_line"}
    flips, summary = [], None
    for rec in records[1:]:
        kind = rec["record"]
        if kind == "flip":
            flips.append(rec)
        elif kind == "summary":
            summary = {k: v for k, v in rec.items() if k != "_line"}
        elif kind not in ("trial", "row"):
            raise LogFormatError(f"unknown record type {kind!r}", rec["_line"], path)
    return EventLog(path, header, flips, summary)


# ─────────────────────────────────────────────
# Manifest
# ─────────────────────────────────────────────

def manifest_path(out: Path | str) -> Path:
    out = Path(out)
    return out.with_name(out.name + MANIFEST_SUFFIX)


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = config.TOOL_VERSION
    started_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    finished_at: str | None = None
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    exit_code: int | None = None

    def finish(self, exit_code: int = 0) -> "RunManifest":
        self.finished_at = datetime.now().isoformat(timespec="seconds")
        self.exit_code = exit_code
        return self

    def to_record(self) -> dict:
        return asdict(self)

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_record(), indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")
        log.info("Manifest %s -> %s", self.run_id, path)
        return path

    @classmethod
    def load(cls, path: Path | str) -> "RunManifest":
        path = Path(path)
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("manifest not found", path=path) from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid manifest JSON ({e.msg})", line_no=e.lineno, path=path) from None
        try:
            return cls(**raw)
        except TypeError as e:
            raise ConfigError(f"malformed manifest: {e}", path=path) from None
