"""Text tables and SVG charts from results tables."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import ABLATIONS, ResultRow, aggregate, read_results  # noqa: E402

SVG_SALT = "infomae-report"


def text_table(rows: Sequence[ResultRow]) -> str:
    """Aligned summary, one line per (ratio, variant)."""
    header = ["ratio", "variant", "n", "accuracy", "macro_f1"]
    body = []
    for a in aggregate(rows):
        ratio = "-" if math.isnan(a["ratio"]) else f"{a['ratio']:g}"
        body.append(
            [
                ratio,
                a["variant"],
                str(a["n"]),
                f"{a['accuracy_mean']:.4f} +/- {a['accuracy_std']:.4f}",
                f"{a['macro_f1_mean']:.4f} +/- {a['macro_f1_std']:.4f}",
            ]
        )
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
    return "\n".join(lines) + "\n"


def _save(fig, path: Path):
    with plt.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def ratio_chart(rows: Sequence[ResultRow], path) -> Path | None:
    """Accuracy vs pair ratio, one series per variant; None if no series has 2 points."""
    stats = [a for a in aggregate(rows) if not math.isnan(a["ratio"]) and "@" not in a["variant"]]
    series: dict = {}
    for a in stats:
        series.setdefault(a["variant"], []).append((a["ratio"], a["accuracy_mean"], a["accuracy_std"]))
    series = {k: sorted(v) for k, v in series.items() if len(v) >= 2}
    if not series:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for variant in sorted(series):
        pts = series[variant]
        (line,) = ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=variant)
        line.set_gid(f"series-{variant}")
    ax.set_xlabel("pair ratio")
    ax.set_ylabel("linear-probe accuracy")
    ax.legend()
    fig.tight_layout()
    _save(fig, Path(path))
    return Path(path)


def ablation_chart(rows: Sequence[ResultRow], path) -> Path | None:
    """Bar chart of ablation accuracies at the ratio covering most variants; None if < 2 bars."""
    stats = [a for a in aggregate(rows) if a["variant"] in ABLATIONS and not math.isnan(a["ratio"])]
    if not stats:
        return None
    counts: dict = {}
    for a in stats:
        counts[a["ratio"]] = counts.get(a["ratio"], 0) + 1
    ratio = min(counts, key=lambda r: (-counts[r], r))
    bars = {a["variant"]: a for a in stats if a["ratio"] == ratio}
    order = [v for v in ABLATIONS if v in bars]
    if len(order) < 2:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, v in enumerate(order):
        (bar,) = ax.bar([i], [bars[v]["accuracy_mean"]], yerr=[bars[v]["accuracy_std"]], capsize=3)
        bar.set_gid(f"bar-{v}")
    ax.set_xticks(range(len(order)), order)
    ax.set_ylabel("linear-probe accuracy")
    ax.set_title(f"pair ratio {ratio:g}")
    fig.tight_layout()
    _save(fig, Path(path))
    return Path(path)


def build_report(result_files: Sequence, out_dir) -> dict:
    """Read every results table, write report.txt plus whichever charts apply."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for f in result_files:
        rows.extend(read_results(f))
    written = {"table": out_dir / "report.txt"}
    written["table"].write_text(text_table(rows))
    chart = ratio_chart(rows, out_dir / "report.svg")
    if chart is not None:
        written["ratio_chart"] = chart
    bars = ablation_chart(rows, out_dir / "ablation.svg")
    if bars is not None:
        written["ablation_chart"] = bars
    return written
