"""Dependency-free SVG line charts of training metrics, with the data embedded."""

from __future__ import annotations

import csv
import io
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

__all__ = ["DEFAULT_COLUMNS", "metrics_svg", "series_table_csv"]

DEFAULT_COLUMNS = ("mean_total_reward", "mean_completion_length", "mean_kl")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
PANEL_W, PANEL_H = 520, 180
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 30, 30


def _num(v: float) -> str:
    return f"{v:.6g}"


def series_table_csv(series: Mapping[str, Sequence], columns: Sequence[str]) -> str:
    """Long-format table ``run,step,<columns...>`` of every plotted point."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "step", *columns])
    for name, rows in series.items():
        for r in rows:
            w.writerow([name, r.step, *(_num(float(getattr(r, c))) for c in columns)])
    return buf.getvalue()


def _ticks(lo: float, hi: float) -> list[float]:
    return [lo + (hi - lo) * i / 4 for i in range(5)]


def metrics_svg(series: Mapping[str, Sequence], columns: Sequence[str] = DEFAULT_COLUMNS, title: str = "") -> str:
    """One panel per column, one polyline per run.

    ``series`` maps a run name to its metric rows (objects with ``step`` and
    the named attributes).  Output depends only on the input values.
    """
    if not series:
        raise ValueError("nothing to plot")
    height = MARGIN_T + len(columns) * (PANEL_H + MARGIN_T + MARGIN_B)
    width = MARGIN_L + PANEL_W + MARGIN_R
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f"<title>{escape(title or 'training metrics')}</title>",
        "<desc>",
        escape(series_table_csv(series, columns)),
        "</desc>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    all_steps = [r.step for rows in series.values() for r in rows]
    x_lo, x_hi = (min(all_steps), max(all_steps)) if all_steps else (0, 1)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    for p, col in enumerate(columns):
        top = MARGIN_T + p * (PANEL_H + MARGIN_T + MARGIN_B) + MARGIN_T
        vals = [float(getattr(r, col)) for rows in series.values() for r in rows]
        y_lo, y_hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5

        def sx(x):
            return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * PANEL_W

        def sy(y):
            return top + PANEL_H - (y - y_lo) / (y_hi - y_lo) * PANEL_H

        out.append(f'<text x="{MARGIN_L}" y="{top - 8}" font-weight="bold">{escape(col)}</text>')
        out.append(
            f'<rect x="{MARGIN_L}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>'
        )
        for t in _ticks(y_lo, y_hi):
            y = sy(t)
            out.append(f'<line x1="{MARGIN_L - 4}" y1="{y:.2f}" x2="{MARGIN_L}" y2="{y:.2f}" stroke="#444"/>')
            out.append(f'<text x="{MARGIN_L - 6}" y="{y + 4:.2f}" text-anchor="end">{_num(t)}</text>')
        for t in _ticks(x_lo, x_hi):
            x = sx(t)
            yb = top + PANEL_H
            out.append(f'<line x1="{x:.2f}" y1="{yb}" x2="{x:.2f}" y2="{yb + 4}" stroke="#444"/>')
            out.append(f'<text x="{x:.2f}" y="{yb + 16}" text-anchor="middle">{_num(t)}</text>')
        for k, (name, rows) in enumerate(series.items()):
            color = PALETTE[k % len(PALETTE)]
            pts = " ".join(f"{sx(r.step):.2f},{sy(float(getattr(r, col))):.2f}" for r in rows)
            if pts:
                out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
            ly = top + 14 + 16 * k
            lx = MARGIN_L + PANEL_W + 10
            out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{lx + 22}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
