"""Report bundle: per-token perplexity charts, metric and detection tables.

Charts are standalone SVG files written directly (no plotting dependency),
so their bytes are a pure function of the plotted values. Every bar carries
a ``data-value`` attribute with the exact per-token perplexity string used
in the CSV tables, and anchor positions are highlighted from ground truth.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from . import data as dat
from .errors import MissingArtifactError

BAR_FILL = "#6b8fb3"
ANCHOR_FILL = "#c0504d"


def write_bar_chart_svg(path, values, highlight, labels, title):
    """Vertical bar chart; ``highlight[i]`` recolors bar i as an anchor."""
    n = len(values)
    bar_w, gap, left, top, plot_h = 34, 10, 50, 30, 160
    width = left + n * (bar_w + gap) + 20
    height = top + plot_h + 50
    vmax = max(max(values, default=0.0), 1e-9)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{left}" y="18" font-family="monospace" font-size="13">{title}</text>',
        f'<line x1="{left - 6}" y1="{top + plot_h}" x2="{width - 10}" y2="{top + plot_h}" '
        'stroke="#333" stroke-width="1"/>',
    ]
    for i, (value, is_anchor, label) in enumerate(zip(values, highlight, labels)):
        h = plot_h * (value / vmax)
        x = left + i * (bar_w + gap)
        y = top + plot_h - h
        fill = ANCHOR_FILL if is_anchor else BAR_FILL
        lines.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w}" height="{h:.2f}" '
            f'fill="{fill}" data-value="{value}" data-anchor="{int(bool(is_anchor))}"/>'
        )
        lines.append(
            f'<text x="{x + bar_w / 2:.2f}" y="{top + plot_h + 16}" font-family="monospace" '
            f'font-size="11" text-anchor="middle">{label}</text>'
        )
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def _read_per_token(path):
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table.setdefault(int(row["example_id"]), []).append(
                (int(row["position"]), int(row["token_id"]), row["perplexity"])
            )
    for rows in table.values():
        rows.sort()
    return table


def emit_report(run_dir, config) -> list[str]:
    """Build the report bundle inside ``run_dir``; returns relative paths.

    Requires a run completed through evaluation; missing artifacts raise
    MissingArtifactError listing every absent file.
    """
    run_dir = Path(run_dir)
    from .pipeline import BASELINE_ARM, RunContext, arm_name  # cycle-free at call time

    ctx = RunContext(config, run_dir)
    arms = ctx.arms()
    needed = ["data/test.jsonl", "weights/detection_quality.json"]
    needed += [f"eval/eval_{arm}.json" for arm in arms]
    needed += [f"eval/per_token_{m}.csv" for m in ctx.chart_models()]
    missing = [rel for rel in needed if not (run_dir / rel).exists()]
    if missing:
        raise MissingArtifactError(missing)

    outputs = []
    test_split = dat.load(run_dir / "data/test.jsonl")

    # (a) per-token perplexity charts with anchors highlighted
    chart_examples = [ex for ex in test_split][: config.chart_examples]
    for model_name in ctx.chart_models():
        table = _read_per_token(run_dir / f"eval/per_token_{model_name}.csv")
        for ex in chart_examples:
            rows = table.get(ex.id, [])
            values = [float(p) for _, _, p in rows]
            labels = [str(tok) for _, tok, _ in rows]
            rel = f"report/charts/example_{ex.id}_{model_name}.svg"
            write_bar_chart_svg(
                ctx.path(rel),
                values,
                ex.anchor_mask,
                labels,
                f"example {ex.id} per-token perplexity ({model_name})",
            )
            outputs.append(rel)

    # (b) metric comparison table across arms
    metric_names = [
        "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l",
        "exact_match", "anchor_token_accuracy", "mean_perplexity",
    ]
    arm_metrics = {}
    for arm in arms:
        with open(run_dir / f"eval/eval_{arm}.json") as fh:
            arm_metrics[arm] = json.load(fh)["metrics"]
    rel = "report/metrics_table.csv"
    with open(ctx.path(rel), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm"] + metric_names)
        for arm in arms:
            writer.writerow(
                [arm] + [format(arm_metrics[arm][m], ".6g") for m in metric_names]
            )
    outputs.append(rel)
    rel = "report/metrics_table.txt"
    with open(ctx.path(rel), "w") as fh:
        header = f"{'arm':<14}" + "".join(f"{m:>22}" for m in metric_names)
        fh.write(header + "\n")
        for arm in arms:
            fh.write(
                f"{arm:<14}"
                + "".join(f"{arm_metrics[arm][m]:>22.6g}" for m in metric_names)
                + "\n"
            )
    outputs.append(rel)

    # (c) detection quality table
    with open(run_dir / "weights/detection_quality.json") as fh:
        quality = json.load(fh)["quality"]
    rel = "report/detection_quality.csv"
    with open(ctx.path(rel), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "auc", "precision_at_k"])
        for method in sorted(quality):
            writer.writerow(
                [method, format(quality[method]["auc"], ".6g"),
                 format(quality[method]["precision_at_k"], ".6g")]
            )
    outputs.append(rel)
    return outputs
