"""Report files: report.json, report.csv and static SVG plots."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed salt and no timestamp keep SVG bytes reproducible
plt.rcParams["svg.hashsalt"] = "flexattn"


def _clean(obj):
    """Make numpy scalars and tuples JSON-friendly."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return obj.item()
    return obj


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n"


def write_json(out_dir, doc, name: str = "report.json") -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(doc))
    return path


def write_csv(out_dir, rows: list[dict], fieldnames=None, name: str = "report.csv") -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames += [k for k in r if k not in fieldnames]
    with open(path, "w", newline="") as fh:
        if fieldnames:
            writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
            writer.writeheader()
            writer.writerows(_clean(rows))
    return path


def line_plot(out_dir, name: str, series: dict, xlabel: str, ylabel: str, title: str,
              logy: bool = False) -> Path | None:
    """``series`` maps a label to (xs, ys).  Writes plots/<name>.svg; skips empty input."""
    series = {k: v for k, v in series.items() if len(v[0])}
    if not series:
        return None
    path = Path(out_dir) / "plots" / f"{name}.svg"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if logy:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def bar_plot(out_dir, name: str, labels: list, values: list, ylabel: str, title: str) -> Path | None:
    if not labels:
        return None
    path = Path(out_dir) / "plots" / f"{name}.svg"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([str(x) for x in labels], values)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
