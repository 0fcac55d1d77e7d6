"""
Run-log aggregation in the layout of the irradiation result tables:
Element, Device, Used Memory, Pattern, Time, Flips.
"""

import logging
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from fluxsim import Observation
from runlog import EventLog, read_event_log, write_jsonl

log = logging.getLogger("REPORT")

COLUMNS = ["Element", "Device", "Used Memory", "Pattern", "Time", "Flips"]
GROUP_KEYS = ["Element", "Device", "Used Memory", "Pattern"]


def _used_memory(region_bytes) -> str:
    if region_bytes is None:
        return "-"
    gib = int(region_bytes) / (1 << 30)
    return f"{gib:g} GB" if gib >= 1 else f"{int(region_bytes) / (1 << 20):g} MB"


def _flip_total(ev: EventLog) -> int:
    s = ev.summary or {}
    if "flips" in s:
        return int(s["flips"])
    if "detected" in s:
        return int(s["detected"])
    return len(ev.flips)


def row_from_log(ev: EventLog) -> dict | None:
    h = ev.header
    if ev.kind in ("campaign", "report"):
        return None
    plan = ev.plan
    if plan:
        device = plan.get("device", {})
        return {
            "Element": plan.get("isotope") or "ambient",
            "Device": device.get("label") or "custom",
            "Used Memory": _used_memory(plan.get("region_bytes")),
            "Pattern": plan.get("pattern", "-"),
            "Time": float(plan.get("duration_s", 0.0)),
            "Flips": _flip_total(ev),
        }
    scan = h.get("scan", {})
    return {
        "Element": h.get("element", "-"),
        "Device": h.get("device", "host"),
        "Used Memory": _used_memory(scan.get("region_bytes")),
        "Pattern": scan.get("pattern", "-"),
        "Time": float(scan.get("total_duration_s", 0.0)),
        "Flips": _flip_total(ev),
    }


def summarize_logs(paths: Iterable[Path | str]) -> pd.DataFrame:
    """One row per (element, device, memory, pattern); Time and Flips are summed."""
    rows = []
    for p in paths:
        ev = read_event_log(p)
        row = row_from_log(ev)
        if row is None:
            log.warning("Skipping %s: %s logs have no flip table", p, ev.kind)
            continue
        rows.append(row)

    if not rows:
        return pd.DataFrame(columns=COLUMNS)

    df = pd.DataFrame(rows, columns=COLUMNS)
    table = (
        df.groupby(GROUP_KEYS, sort=False, as_index=False)
          .agg(Time=("Time", "sum"), Flips=("Flips", "sum"))
          .sort_values(["Element", "Device", "Pattern"], kind="mergesort")
          .reset_index(drop=True)
    )
    log.info("Report: %d logs -> %d rows, %d flips", len(rows), len(table), int(table["Flips"].sum()))
    return table


def element_totals(table: pd.DataFrame) -> pd.DataFrame:
    if table.empty:
        return pd.DataFrame(columns=["Element", "Time", "Flips", "Seconds per Flip"])
    tot = table.groupby("Element", as_index=False).agg(Time=("Time", "sum"), Flips=("Flips", "sum"))
    tot["Seconds per Flip"] = np.where(tot["Flips"] > 0, tot["Time"] / tot["Flips"].clip(lower=1), np.inf)
    return tot


def table_records(table: pd.DataFrame) -> list[dict]:
    """Table rows as JSON Lines records with plain Python values."""
    return [
        {"record": "row", **{k: v.item() if isinstance(v, np.generic) else v for k, v in row.items()}}
        for row in table.to_dict("records")
    ]


def format_table(table: pd.DataFrame) -> str:
    if table.empty:
        return "(no runs)"
    out = table.copy()
    out["Time"] = out["Time"].map(lambda t: f"{t / 60:g} min")
    return out.to_string(index=False)


# ─────────────────────────────────────────────
# Observation fixtures
# ─────────────────────────────────────────────

def export_observation_logs(observations: Iterable[Observation], out_dir: Path | str) -> list[Path]:
    """One event log per observed session, carrying its count in the summary.

    Observed sessions have no per-flip timing, so the logs hold a header and
    a summary only.
    """
    out_dir = Path(out_dir)
    paths = []
    for i, o in enumerate(observations):
        path = out_dir / f"obs_{i:02d}_{o.isotope}_{o.pattern.fill_byte:02X}.jsonl"
        header = {
            "record": "header",
            "kind": "observation",
            "plan": {
                "isotope": o.isotope,
                "device": {"label": o.device},
                "pattern": str(o.pattern),
                "duration_s": o.duration_s,
                "region_bytes": int(o.region_gib * (1 << 30)),
            },
        }
        write_jsonl(path, [header, {"record": "summary", "flips": o.flip_count}])
        paths.append(path)
    return paths


# ─────────────────────────────────────────────
# Excel export
# ─────────────────────────────────────────────

def save_to_excel(df: pd.DataFrame, filepath: Path | str, sheet_name: str = "Flips"):
    from openpyxl import Workbook
    from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
    from openpyxl.utils import get_column_letter

    wb = Workbook()
    ws = wb.active
    ws.title = sheet_name

    cols = list(df.columns)
    header_fill = PatternFill("solid", fgColor="D6E4F0")
    count_fill = PatternFill("solid", fgColor="C6EFCE")
    header_font = Font(bold=True, size=10)
    data_font = Font(size=9)
    thin_border = Border(bottom=Side(style="thin", color="CCCCCC"))

    for col_idx, col_name in enumerate(cols, 1):
        cell = ws.cell(row=1, column=col_idx, value=col_name)
        cell.font = header_font
        cell.alignment = Alignment(horizontal="center", wrap_text=True)
        cell.fill = count_fill if col_name == "Flips" else header_fill

    for row_idx, (_, row_data) in enumerate(df.iterrows(), 2):
        for col_idx, col_name in enumerate(cols, 1):
            val = row_data[col_name]
            if pd.isna(val): val = None
            elif isinstance(val, (np.floating, float)): val = round(float(val), 2) if np.isfinite(val) else None
            elif isinstance(val, (np.integer,)): val = int(val)

            cell = ws.cell(row=row_idx, column=col_idx, value=val)
            cell.font = data_font
            cell.border = thin_border
            if col_name == "Flips":
                cell.number_format = "#,##0"
            elif col_name in ("Time", "Seconds per Flip"):
                cell.number_format = "#,##0.0"

    for col_idx, col_name in enumerate(cols, 1):
        ws.column_dimensions[get_column_letter(col_idx)].width = 16 if col_name == "Device" else 12

    ws.auto_filter.ref = ws.dimensions
    ws.freeze_panes = "B2"
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    wb.save(filepath)
    log.info("Saved %s (%d rows)", filepath, len(df))
