"""Label-budget result summaries: CSV tables and a dependency-free SVG chart.

The chart puts the label budget on a log-scaled x axis and the task metric
(macro-F1 or MIoU) on y in [0, 1]; each method gets one polyline through the
per-budget means plus a min-max band across seeds.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

METHOD_COLORS = {
    "random": "#7f7f7f",
    "simclr": "#1f77b4",
    "simclr_elev": "#d62728",
    "glcnet": "#2ca02c",
    "glcnet_elev": "#9467bd",
    "elevation": "#ff7f0e",
}
_FALLBACK_COLOR = "#17becf"

WIDTH, HEIGHT = 640, 420
ML, MR, MT, MB = 70, 30, 40, 60


def summarize_results(
    rows: Sequence[dict], metric_key: str
) -> dict[tuple[str, int], dict]:
    """Aggregate result rows into mean/min/max of a metric per (method, budget)."""
    grouped: dict[tuple[str, int], list[float]] = {}
    for row in rows:
        key = (row["method"], int(row["budget"]))
        grouped.setdefault(key, []).append(float(row["metrics"][metric_key]))
    return {
        key: {
            "mean": sum(vals) / len(vals),
            "min": min(vals),
            "max": max(vals),
            "n": len(vals),
        }
        for key, vals in grouped.items()
    }


def write_summary_csv(path: Path, summary: dict, metric_name: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "budget", "metric", "mean", "min", "max", "n_seeds"])
        for (method, budget) in sorted(summary, key=lambda k: (k[0], k[1])):
            cell = summary[(method, budget)]
            writer.writerow(
                [
                    method,
                    budget,
                    metric_name,
                    f"{cell['mean']:.6f}",
                    f"{cell['min']:.6f}",
                    f"{cell['max']:.6f}",
                    cell["n"],
                ]
            )


def _x_scale(budgets: Sequence[int]):
    lo = math.log10(min(budgets))
    hi = math.log10(max(budgets))
    span = hi - lo
    inner = WIDTH - ML - MR

    def to_x(budget: int) -> float:
        if span == 0:
            return ML + inner / 2
        return ML + (math.log10(budget) - lo) / span * inner

    return to_x


def _to_y(value: float) -> float:
    inner = HEIGHT - MT - MB
    return HEIGHT - MB - max(0.0, min(1.0, value)) * inner


def render_plot_svg(
    path: Path, summary: dict, metric_name: str, title: str = ""
) -> None:
    """Write the budget-vs-metric chart. One polyline per method (data-method
    attribute), one min-max band polygon per method, log-x, y fixed to [0,1]."""
    if not summary:
        raise ValueError("no results to plot")
    budgets = sorted({b for (_, b) in summary})
    methods = sorted({m for (m, _) in summary})
    to_x = _x_scale(budgets)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" '
            f'font-size="15">{title}</text>'
        )

    # grid + axes
    for i in range(6):
        v = i / 5
        y = _to_y(v)
        parts.append(
            f'<line x1="{ML}" y1="{y:.1f}" x2="{WIDTH - MR}" y2="{y:.1f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{ML - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.1f}</text>'
        )
    for b in budgets:
        x = to_x(b)
        parts.append(
            f'<line x1="{x:.1f}" y1="{MT}" x2="{x:.1f}" y2="{HEIGHT - MB}" '
            f'stroke="#eeeeee" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{HEIGHT - MB + 18}" text-anchor="middle">{b}</text>'
        )
    parts.append(
        f'<line x1="{ML}" y1="{HEIGHT - MB}" x2="{WIDTH - MR}" y2="{HEIGHT - MB}" '
        f'stroke="#333333" stroke-width="1.5"/>'
    )
    parts.append(
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{HEIGHT - MB}" '
        f'stroke="#333333" stroke-width="1.5"/>'
    )
    parts.append(
        f'<text x="{(ML + WIDTH - MR) / 2:.1f}" y="{HEIGHT - 16}" '
        f'text-anchor="middle">labeled tiles (log scale)</text>'
    )
    parts.append(
        f'<text x="18" y="{(MT + HEIGHT - MB) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(MT + HEIGHT - MB) / 2:.1f})">{metric_name}</text>'
    )

    # bands then lines so lines stay visible
    for method in methods:
        cells = [(b, summary[(method, b)]) for b in budgets if (method, b) in summary]
        if not cells:
            continue
        color = METHOD_COLORS.get(method, _FALLBACK_COLOR)
        upper = [f"{to_x(b):.2f},{_to_y(c['max']):.2f}" for b, c in cells]
        lower = [f"{to_x(b):.2f},{_to_y(c['min']):.2f}" for b, c in reversed(cells)]
        parts.append(
            f'<polygon data-method="{method}" class="band" '
            f'points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.15" '
            f'stroke="none"/>'
        )
    for mi, method in enumerate(methods):
        cells = [(b, summary[(method, b)]) for b in budgets if (method, b) in summary]
        if not cells:
            continue
        color = METHOD_COLORS.get(method, _FALLBACK_COLOR)
        pts = " ".join(f"{to_x(b):.2f},{_to_y(c['mean']):.2f}" for b, c in cells)
        parts.append(
            f'<polyline data-method="{method}" points="{pts}" fill="none" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        for b, c in cells:
            parts.append(
                f'<circle data-method="{method}" cx="{to_x(b):.2f}" '
                f'cy="{_to_y(c["mean"]):.2f}" r="3" fill="{color}"/>'
            )
        ly = MT + 16 + 16 * mi
        lx = WIDTH - MR - 150
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{lx + 28}" y="{ly}">{method}</text>')

    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
