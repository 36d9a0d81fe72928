"""Experiment report files: ``<out>.json``, ``<out>.txt`` and optionally ``.csv`` / ``.xlsx``"""
import json
import logging
from pathlib import Path

import pandas as pd
from openpyxl import Workbook

from app import __version__

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "tgr-report/1"
MEAN_BLACK_BOX = "mean_black_box"


def transfer_frame(reports) -> pd.DataFrame:
    """Attack rows by target-model columns, ASR in percent"""
    rows = []
    for r in reports:
        row = {"attack": r.attack_name, **r.per_target}
        row[MEAN_BLACK_BOX] = r.mean_black_box_asr
        rows.append(row)
    return pd.DataFrame(rows).set_index("attack")


def variance_frame(profiles) -> pd.DataFrame:
    rows = []
    for p in profiles:
        row = {"attack": p.attack_name}
        row.update({f"block_{i}": v for i, v in enumerate(p.per_block)})
        row.update({"shallow": p.level_averages[0], "middle": p.level_averages[1], "deep": p.level_averages[2]})
        row["overall"] = p.overall_average
        rows.append(row)
    return pd.DataFrame(rows).set_index("attack")


def ablation_frame(rows) -> pd.DataFrame:
    frame = transfer_frame([r.report for r in rows])
    frame.index = pd.Index([r.label for r in rows], name="components")
    return frame


def sweep_frame(rows) -> pd.DataFrame:
    frame = transfer_frame([r.report for r in rows])
    frame.index = pd.Index([r.k for r in rows], name="k")
    return frame


def render_text(title: str, frame: pd.DataFrame, float_format: str = "{:.1f}") -> str:
    body = frame.to_string(float_format=float_format.format, na_rep="-")
    return f"{title}\n\n{body}\n"


def report_payload(kind: str, source: str, entries, **extra) -> dict:
    payload = {"schema": REPORT_SCHEMA, "kind": kind, "source": source, "tool_version": __version__}
    payload.update(extra)
    payload["entries"] = [e.to_dict() if hasattr(e, "to_dict") else e for e in entries]
    return payload


def _write_xlsx(path: Path, payload: dict, frame: pd.DataFrame):
    wb = Workbook()

    ws_summary = wb.active
    ws_summary.title = "Summary"
    summary_data = [
        ["Report", payload.get("kind")],
        ["Source Model", payload.get("source")],
        ["Schema", payload.get("schema")],
        ["Tool Version", payload.get("tool_version")],
        ["Rows", len(frame)],
    ]
    for row_idx, (label, value) in enumerate(summary_data, 1):
        ws_summary.cell(row=row_idx, column=1, value=label)
        ws_summary.cell(row=row_idx, column=2, value=value)

    ws_results = wb.create_sheet("Results")
    headers = [frame.index.name or ""] + [str(c) for c in frame.columns]
    for col_idx, header in enumerate(headers, 1):
        ws_results.cell(row=1, column=col_idx, value=header)
    for row_idx, (label, values) in enumerate(frame.iterrows(), 2):
        ws_results.cell(row=row_idx, column=1, value=str(label))
        for col_idx, value in enumerate(values, 2):
            ws_results.cell(row=row_idx, column=col_idx, value=None if pd.isna(value) else float(value))

    wb.save(path)


def write_report(out_prefix, payload: dict, frame: pd.DataFrame, title: str,
                 csv: bool = False, xlsx: bool = False) -> list:
    """Write the report files next to out_prefix; returns the paths written"""
    prefix = Path(out_prefix)
    if prefix.parent and not prefix.parent.exists():
        prefix.parent.mkdir(parents=True, exist_ok=True)

    written = []
    json_path = prefix.with_name(prefix.name + ".json")
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(json_path)

    txt_path = prefix.with_name(prefix.name + ".txt")
    txt_path.write_text(render_text(title, frame), encoding="utf-8")
    written.append(txt_path)

    if csv:
        csv_path = prefix.with_name(prefix.name + ".csv")
        frame.to_csv(csv_path, float_format="%.6f")
        written.append(csv_path)
    if xlsx:
        xlsx_path = prefix.with_name(prefix.name + ".xlsx")
        _write_xlsx(xlsx_path, payload, frame)
        written.append(xlsx_path)

    logger.info(f"Wrote {payload.get('kind')} report: {', '.join(str(p) for p in written)}")
    return written
