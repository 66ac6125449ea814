# pipeline/report_utils.py
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd
from tabulate import tabulate

# ----------------------------
# Defaults
# ----------------------------
TRACE_COLUMNS = ["episode", "L_cls", "L_mse", "L_aal", "L_acl", "L_ccl", "total"]
METRIC_COLUMNS = ["ACC", "U", "S", "H"]
LOSS_TRACE_CSV = "loss_trace.csv"


# ----------------------------
# Loss trace
# ----------------------------
def write_loss_trace(rows: Sequence[Mapping[str, float]], path: Path) -> Path:
    """Write the per-episode loss trace CSV (episode,L_cls,L_mse,L_aal,L_acl,L_ccl,total)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(list(rows), columns=TRACE_COLUMNS)
    df["episode"] = df["episode"].astype(int)
    df.to_csv(path, index=False)
    return path


def read_loss_trace(path: Path, up_to_episode: Optional[int] = None) -> List[Dict[str, float]]:
    """Rows of an existing trace, optionally cut at a given episode (for resumed runs)."""
    path = Path(path)
    if not path.exists():
        return []
    df = pd.read_csv(path)
    if up_to_episode is not None:
        df = df[df["episode"] <= up_to_episode]
    return df.to_dict(orient="records")


# ----------------------------
# Evaluation reports
# ----------------------------
def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.1f}"


def metric_row(report: Mapping[str, Any]) -> Dict[str, Optional[float]]:
    return {
        "ACC": report.get("acc_czsl"),
        "U": report.get("u"),
        "S": report.get("s"),
        "H": report.get("h"),
    }


def report_summary_str(report: Mapping[str, Any]) -> str:
    """Compact one-liner like 'ACC 66.7 / U 50.0 / S 90.0 / H 64.3'."""
    row = metric_row(report)
    return " / ".join(f"{k} {_fmt(row[k])}" for k in METRIC_COLUMNS)


def metrics_table(rows: Iterable[Mapping[str, Any]], label: str) -> str:
    """Aligned text table, one decimal place, columns ACC U S H after the label column."""
    table = []
    for row in rows:
        metrics = metric_row(row)
        table.append([row.get(label, "")] + [_fmt(metrics[k]) for k in METRIC_COLUMNS])
    return tabulate(table, headers=[label] + METRIC_COLUMNS, tablefmt="simple", stralign="right")


def write_report_json(report: Mapping[str, Any], path: Path) -> Path:
    """Full precision machine-readable report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(dict(report), f, indent=2, sort_keys=True)
    return path


def write_reports_csv(rows: Sequence[Mapping[str, Any]], path: Path, label: str) -> Path:
    """One row per setting (gamma, ablation stage, swept value) at full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [{label: r.get(label), **metric_row(r)} for r in rows]
    pd.DataFrame(records, columns=[label] + METRIC_COLUMNS).to_csv(path, index=False)
    return path


def summary_table(stats: Mapping[str, Any]) -> str:
    return tabulate([list(stats.values())], headers=list(stats.keys()), tablefmt="simple")
