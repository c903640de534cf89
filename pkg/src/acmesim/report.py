"""Plot-ready CSV tables derived from a run report."""

from __future__ import annotations

import csv
import json
from pathlib import Path

ACCURACY_FILE = "accuracy_vs_size.csv"
ENERGY_FILE = "energy_vs_spec.csv"
HEATMAP_FILE = "similarity_heatmap.csv"


class ReportError(ValueError):
    """The run report is missing, unreadable or lacks required sections."""


def load_report(path: str | Path) -> dict:
    path = Path(path)
    try:
        report = json.loads(path.read_text())
    except FileNotFoundError:
        raise ReportError(f"{path}: no such report (run `run-all` first)") from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ReportError(f"{path}: corrupt report: {e}") from None
    if not isinstance(report, dict):
        raise ReportError(f"{path}: corrupt report: top level is not an object")
    try:
        stages = report["stages"]
        stages["backbone"]["clusters"]
        stages["evaluation"]["devices"]
        stages["header_search"]
    except (KeyError, TypeError) as e:
        raise ReportError(f"{path}: corrupt report: missing {e}") from None
    return report


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _write(path: Path, fields: list[str], rows: list[dict]) -> int:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})
    return len(rows)


def accuracy_rows(report: dict) -> list[dict]:
    """One row per device: its cluster's backbone size and its accuracies."""
    st = report["stages"]
    clusters = st["backbone"]["clusters"]
    rows = []
    for dev, v in sorted(st["evaluation"]["devices"].items()):
        c = v["cluster"]
        sel = clusters[c]["selected"]
        zeta = next(r["size"] for r in clusters[c]["rows"]
                    if r["w"] == sel["w"] and r["d"] == sel["d"])
        rows.append({"device": dev, "cluster": c, "w": sel["w"], "d": sel["d"], "zeta": zeta,
                     "header_params": st["header_search"][c]["header_params"],
                     "coarse_accuracy": v["coarse_accuracy"],
                     "final_accuracy": v["final_accuracy"]})
    return rows


def energy_rows(report: dict) -> list[dict]:
    """One row per (cluster, candidate)."""
    rows = []
    for c, audit in sorted(report["stages"]["backbone"]["clusters"].items()):
        for r in audit["rows"]:
            rows.append({"cluster": c, "w": r["w"], "d": r["d"], "size": r["size"],
                         "energy": r["energy"], "loss": r["loss"], "in_pfg": r["in_pfg"],
                         "feasible": r["feasible"], "selected": r["selected"]})
    return rows


def heatmap_rows(report: dict) -> list[dict]:
    """Long form of every cluster's normalized similarity matrix."""
    rows = []
    for c, p in sorted(report["stages"].get("personalization", {}).items()):
        sim = p["similarity"]
        ids = sim["device_ids"]
        for i, a in enumerate(ids):
            for j, b in enumerate(ids):
                rows.append({"cluster": c, "device_i": a, "device_j": b,
                             "W": sim["W"][i][j], "W_hat": sim["W_hat"][i][j]})
    return rows


def write_report_csvs(report: dict, out_dir: str | Path) -> dict[str, int]:
    """Emit the tables; the heatmap exists only when personalization ran."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {
        ACCURACY_FILE: _write(out / ACCURACY_FILE,
                              ["device", "cluster", "w", "d", "zeta", "header_params",
                               "coarse_accuracy", "final_accuracy"], accuracy_rows(report)),
        ENERGY_FILE: _write(out / ENERGY_FILE,
                            ["cluster", "w", "d", "size", "energy", "loss", "in_pfg",
                             "feasible", "selected"], energy_rows(report)),
    }
    heat = heatmap_rows(report)
    if heat:
        counts[HEATMAP_FILE] = _write(out / HEATMAP_FILE,
                                      ["cluster", "device_i", "device_j", "W", "W_hat"], heat)
    elif (out / HEATMAP_FILE).exists():
        (out / HEATMAP_FILE).unlink()  # stale table from an earlier report
    return counts
