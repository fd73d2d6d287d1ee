"""Human-readable rendering of evaluation output.

Takes one or more evaluation JSON files (counts, metrics, reliability table,
net-benefit table) and writes a markdown summary, CSV tables, and figures
(reliability diagram, decision curve) into a report directory.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import IoFailure, MalformedHeader

_EVAL_KEYS = {"n", "tau", "counts", "metrics", "calibration", "net_benefit"}


def load_eval(path: str | os.PathLike) -> dict:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read evaluation file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"unparseable evaluation file {path}: {exc}") from exc
    if not isinstance(data, dict) or not _EVAL_KEYS.issubset(data):
        missing = sorted(_EVAL_KEYS - set(data or {}))
        raise MalformedHeader(f"evaluation file {path} missing keys {missing}")
    return data


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _reliability_figure(data: dict, path: str, label: str) -> None:
    cal = data["calibration"]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=1, label="ideal")
    centers = [(b["lower"] + b["upper"]) / 2 for b in cal["bins"]]
    widths = [b["upper"] - b["lower"] for b in cal["bins"]]
    fracs = [b["frac_positive"] for b in cal["bins"]]
    means = [b["mean_prob"] for b in cal["bins"]]
    ax.bar(centers, fracs, width=widths, edgecolor="black", color="#7aa6c2",
           alpha=0.8, label="observed frequency")
    ax.plot(means, fracs, marker="o", color="#1f4e79", linestyle="none",
            label="bin mean probability")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("predicted probability")
    ax.set_ylabel("observed responder fraction")
    ax.set_title(f"Reliability ({label}), ECE = {cal['ece']:.3f}")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _decision_curve_figure(data: dict, path: str, label: str) -> None:
    rows = data["net_benefit"]
    thresholds = [r["threshold"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.plot(thresholds, [r["model"] for r in rows], marker="o", markersize=3,
            color="#1f4e79", label="model")
    ax.plot(thresholds, [r["treat_all"] for r in rows], linestyle="--",
            color="#c0504d", label="treat all")
    ax.plot(thresholds, [r["treat_none"] for r in rows], linestyle=":",
            color="gray", label="treat none")
    low = min(min(r["model"] for r in rows), min(r["treat_all"] for r in rows))
    ax.set_ylim(max(low, -0.25) - 0.02, None)
    ax.set_xlabel("threshold probability")
    ax.set_ylabel("net benefit")
    ax.set_title(f"Decision curve ({label})")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _dominant_interval(data: dict) -> str:
    """Thresholds where the model strictly beats both default policies."""
    wins = [
        r["threshold"]
        for r in data["net_benefit"]
        if r["model"] > r["treat_all"] and r["model"] > r["treat_none"]
    ]
    if not wins:
        return "none"
    return f"{min(wins):.2f}-{max(wins):.2f} ({len(wins)} thresholds)"


def render_report(evals: list[tuple[str, dict]], out_dir: str | os.PathLike) -> dict:
    """Write markdown + CSV + figures for the given (label, eval-dict) pairs.

    Returns a dict of the emitted paths.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = {"markdown": os.path.join(out_dir, "report.md"), "figures": [], "csv": []}

    metrics_rows = []
    for label, data in evals:
        c = data["counts"]
        m = data["metrics"]
        metrics_rows.append(
            [
                label,
                data["n"],
                c["tp"],
                c["fn"],
                c["fp"],
                c["tn"],
                m["acc_percent"],
                m["tpr_percent"],
                m["fpr_percent"],
                f"{data['calibration']['ece']:.4f}",
            ]
        )
    metrics_csv = os.path.join(out_dir, "metrics.csv")
    _write_csv(
        metrics_csv,
        ["split", "n", "tp", "fn", "fp", "tn", "acc_percent", "tpr_percent", "fpr_percent", "ece"],
        metrics_rows,
    )
    written["csv"].append(metrics_csv)

    lines = ["# Evaluation report", ""]
    lines.append("| split | n | acc % | tpr % | fpr % | ECE |")
    lines.append("|---|---|---|---|---|---|")
    for row in metrics_rows:
        lines.append(f"| {row[0]} | {row[1]} | {row[6]} | {row[7]} | {row[8]} | {row[9]} |")
    lines.append("")

    for label, data in evals:
        cal_csv = os.path.join(out_dir, f"calibration_{label}.csv")
        _write_csv(
            cal_csv,
            ["lower", "upper", "count", "mean_prob", "frac_positive"],
            [
                [b["lower"], b["upper"], b["count"], b["mean_prob"], b["frac_positive"]]
                for b in data["calibration"]["bins"]
            ],
        )
        nb_csv = os.path.join(out_dir, f"net_benefit_{label}.csv")
        _write_csv(
            nb_csv,
            ["threshold", "model", "treat_all", "treat_none"],
            [
                [r["threshold"], r["model"], r["treat_all"], r["treat_none"]]
                for r in data["net_benefit"]
            ],
        )
        rel_png = os.path.join(out_dir, f"reliability_{label}.png")
        dc_png = os.path.join(out_dir, f"decision_curve_{label}.png")
        _reliability_figure(data, rel_png, label)
        _decision_curve_figure(data, dc_png, label)
        written["csv"].extend([cal_csv, nb_csv])
        written["figures"].extend([rel_png, dc_png])

        c = data["counts"]
        lines.append(f"## {label}")
        lines.append("")
        lines.append(
            f"{data['n']} subjects, outcome threshold tau = {data['tau']}: "
            f"TP {c['tp']}, FN {c['fn']}, FP {c['fp']}, TN {c['tn']}."
        )
        lines.append("")
        lines.append("### Calibration")
        lines.append("")
        lines.append(f"Expected calibration error: **{data['calibration']['ece']:.4f}**")
        lines.append("")
        lines.append("| bin | count | mean prob | observed fraction |")
        lines.append("|---|---|---|---|")
        for b in data["calibration"]["bins"]:
            lines.append(
                f"| [{b['lower']:.1f}, {b['upper']:.1f}) | {b['count']} "
                f"| {b['mean_prob']:.3f} | {b['frac_positive']:.3f} |"
            )
        lines.append("")
        lines.append(f"![reliability]({os.path.basename(rel_png)})")
        lines.append("")
        lines.append("### Net benefit")
        lines.append("")
        lines.append(f"Model strictly dominates both default policies at: {_dominant_interval(data)}")
        lines.append("")
        lines.append(f"![decision curve]({os.path.basename(dc_png)})")
        lines.append("")

    try:
        with open(written["markdown"], "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines))
    except OSError as exc:
        raise IoFailure(f"cannot write report markdown: {exc}") from exc
    return written
