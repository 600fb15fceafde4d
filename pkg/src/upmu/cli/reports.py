"""Report emission: structured JSON, human-readable text and plot-ready CSV."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .analyses import Report


def clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None, tuples to lists."""
    if isinstance(x, dict):
        return {str(k): clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dumps(doc) -> str:
    return json.dumps(clean(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"


def render_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def render_table(columns, rows) -> str:
    cells = [list(map(str, columns))] + [["" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
                                           for v in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(columns))]
    return "\n".join("  ".join(c[i].rjust(widths[i]) for i in range(len(columns))) for c in cells) + "\n"


def render_text(rep: Report) -> str:
    return "\n".join([f"{rep.name} ({rep.kind})", *rep.lines]) + "\n"


def report_document(rep: Report) -> dict:
    return {"name": rep.name, "kind": rep.kind, "result": rep.summary}


def write_report(rep: Report, out_dir: Path) -> dict[str, str]:
    """Write <name>.json, <name>.txt and <name>.csv; returns file names relative to ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"json": f"{rep.name}.json", "text": f"{rep.name}.txt", "csv": f"{rep.name}.csv"}
    (out_dir / files["json"]).write_text(dumps(report_document(rep)))
    (out_dir / files["text"]).write_text(render_text(rep))
    (out_dir / files["csv"]).write_text(render_csv(rep.columns, rep.rows))
    return files
