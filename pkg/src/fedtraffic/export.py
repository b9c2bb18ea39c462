"""CSV and SVG export of run reports."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from fedtraffic.harness import RunReport

CSV_HEADER = ("mode", "seed", "epoch", "mean_speed", "crashed", "steps", "cumulative_reward")

# One colour per mode, in MODES order; extra modes cycle.
PALETTE = ("#444444", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd")


def export_csv(reports: RunReport | Sequence[RunReport], path: str | Path) -> Path:
    """Write one row per (mode, seed, epoch)."""
    if isinstance(reports, RunReport):
        reports = [reports]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            for seed in r.seeds:
                for m in r.series[seed]:
                    w.writerow([r.mode, seed, m.epoch_index, repr(float(m.mean_speed)),
                                int(m.crashed), m.steps, repr(float(m.cumulative_reward))])
    return path


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def export_plot(reports: Sequence[RunReport], path: str | Path,
                width: int = 800, height: int = 480) -> Path:
    """Write a standalone SVG of mean speed against epoch.

    Each mode gets a seed-pooled mean curve (``class="curve"``) over a
    shaded min-max band (``class="band"``). Output depends only on the data.
    """
    if not reports:
        raise ValueError("nothing to plot")
    left, right, top, bottom = 60, 130, 20, 50
    pw, ph = width - left - right, height - top - bottom
    curves = []
    for r in reports:
        speeds = np.array([[m.mean_speed for m in r.series[s]] for s in r.seeds])
        curves.append((r.mode, speeds.mean(axis=0), speeds.min(axis=0), speeds.max(axis=0)))
    n_epochs = max(len(c[1]) for c in curves)
    y_max = max(float(c[3].max()) for c in curves)
    y_max = max(1.0, float(np.ceil(y_max)))
    x_span = max(1, n_epochs - 1)

    def px(i):
        return left + pw * i / x_span

    def py(v):
        return top + ph * (1.0 - v / y_max)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(6):
        v = y_max * k / 5
        out.append(f'<text x="{left - 6}" y="{_fmt(py(v) + 4)}" text-anchor="end">{v:g}</text>')
    for k in range(6):
        e = round((n_epochs - 1) * k / 5)
        out.append(f'<text x="{_fmt(px(e))}" y="{top + ph + 18}" text-anchor="middle">{e}</text>')
    out.append(f'<text x="{left + pw / 2:g}" y="{height - 10}" text-anchor="middle">epoch</text>')
    out.append(f'<text x="15" y="{top + ph / 2:g}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:g})">mean speed (m/s)</text>')
    for j, (mode, mean, lo, hi) in enumerate(curves):
        colour = PALETTE[j % len(PALETTE)]
        xs = [px(i) for i in range(len(mean))]
        band = [f"{_fmt(x)},{_fmt(py(v))}" for x, v in zip(xs, hi)]
        band += [f"{_fmt(x)},{_fmt(py(v))}" for x, v in zip(reversed(xs), lo[::-1])]
        out.append(f'<polygon class="band" data-mode="{mode}" points="{" ".join(band)}" '
                   f'fill="{colour}" fill-opacity="0.15" stroke="none"/>')
        pts = " ".join(f"{_fmt(x)},{_fmt(py(v))}" for x, v in zip(xs, mean))
        out.append(f'<polyline class="curve" data-mode="{mode}" points="{pts}" '
                   f'fill="none" stroke="{colour}" stroke-width="1.5"/>')
        ly = top + 14 + 18 * j
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" '
                   f'y2="{ly - 4}" stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly}">{mode}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path
