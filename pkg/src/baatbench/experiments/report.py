"""CSV tables and PNG plots from run reports."""
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .runner import RunReport, long_form_rows, write_rows  # noqa: E402

SUMMARY_FIELDS = ("config_hash", "name", "seed", "parameter", "value", "arch", "ba", "asr", "failed_stage")


def summary_rows(reports, parameter=None, values=None):
    values = values if values is not None else [None] * len(reports)
    rows = []
    for r, v in zip(reports, values):
        a = r.attack or {}
        rows.append({
            "config_hash": r.config_hash, "name": r.config.get("name"), "seed": r.config.get("seed"),
            "parameter": parameter, "value": v, "arch": r.config.get("arch"),
            "ba": a.get("benign_accuracy"), "asr": a.get("attack_success_rate"),
            "failed_stage": r.failed_stage,
        })
    return rows


def render_report(reports, out_dir, parameter=None, values=None, title=None):
    """Write ``summary.csv`` and ``long.csv``; with a swept parameter also a BA/ASR plot.

    Returns the list of written paths. An empty report list writes
    header-only CSVs and no plot.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = [r if isinstance(r, RunReport) else RunReport.from_dict(r) for r in reports]
    rows = summary_rows(reports, parameter, values)
    files = [write_rows(out / "summary.csv", rows, SUMMARY_FIELDS),
             write_rows(out / "long.csv", long_form_rows(reports, parameter, values))]
    if reports and parameter is not None and len(reports) > 1:
        files.append(plot_sweep(rows, out / "sweep.png", parameter, title))
    for r in reports:
        for d in r.defenses:
            if d.get("trace") and d["defense"] in ("fine_tune", "prune"):
                files.append(plot_trace(d, out / f"{d['defense']}-{r.config_hash}.png", r.config_hash))
    with open(out / "reports.json", "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in reports], f, indent=1, default=str)
    files.append(out / "reports.json")
    return files


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def plot_sweep(rows, path, parameter, title=None):
    xs = [_num(r["value"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(5.5, 3.6))
    ax1.plot(xs, [_num(r["ba"]) for r in rows], "o-", color="tab:blue", label="BA")
    ax1.set_xlabel(parameter)
    ax1.set_ylabel("BA (%)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(xs, [_num(r["asr"]) for r in rows], "s--", color="tab:red", label="ASR")
    ax2.set_ylabel("ASR (%)", color="tab:red")
    for ax in (ax1, ax2):
        ax.set_ylim(-2, 102)
    ax1.set_title(title or f"BA / ASR vs {parameter}", fontsize=10)
    hashes = ", ".join(sorted({r["config_hash"][:8] for r in rows}))
    fig.text(0.01, 0.01, f"configs: {hashes}", fontsize=5)
    fig.tight_layout(rect=(0, 0.04, 1, 1))
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_trace(defense_report, path, config_hash):
    trace = defense_report["trace"]
    xkey = "epoch" if defense_report["defense"] == "fine_tune" else "beta"
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot([t[xkey] for t in trace], [t["ba"] for t in trace], "o-", ms=3, label="BA")
    ax.plot([t[xkey] for t in trace], [t["asr"] for t in trace], "s--", ms=3, label="ASR")
    ax.set_xlabel(xkey)
    ax.set_ylabel("%")
    ax.set_ylim(-2, 102)
    ax.legend()
    ax.set_title(f"{defense_report['defense']} ({config_hash[:8]})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
