"""Deterministic static SVG line charts for metrics files.

Output is a pure function of the input series: fixed canvas, fixed palette,
fixed float formatting, no timestamps, so identical inputs give identical
bytes.
"""

from __future__ import annotations

import math
from pathlib import Path

from .metrics import numeric_keys, read_metrics

WIDTH, HEIGHT = 900, 520
PLOT = (80.0, 40.0, 860.0, 460.0)  # x0, y0, x1, y1
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f")


class SeriesError(ValueError):
    """Requested series key is absent; message lists what exists."""


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    value = start
    while value <= hi + 1e-9 * step:
        ticks.append(round(value, 10))
        value += step
    return ticks


def _fmt(value: float) -> str:
    return f"{value:g}"


def render_line_chart(series: list[tuple[str, list[float], list[float]]],
                      title: str = "", x_label: str = "", y_label: str = "") -> str:
    """Render named (xs, ys) series to an SVG document string."""
    x0, y0, x1, y1 = PLOT
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise SeriesError("no data points to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return x0 + (x - x_lo) / (x_hi - x_lo) * (x1 - x0)

    def py(y: float) -> float:
        return y1 - (y - y_lo) / (y_hi - y_lo) * (y1 - y0)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{x0:.1f}" y="{y0:.1f}" width="{x1 - x0:.1f}" height="{y1 - y0:.1f}" '
           'fill="none" stroke="#333" stroke-width="1"/>']
    if title:
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="24" text-anchor="middle" '
                   f'font-family="monospace" font-size="16">{title}</text>')
    for tick in _ticks(x_lo, x_hi):
        tx = px(tick)
        out.append(f'<line x1="{tx:.2f}" y1="{y1:.1f}" x2="{tx:.2f}" y2="{y1 + 6:.1f}" '
                   'stroke="#333"/>')
        out.append(f'<text x="{tx:.2f}" y="{y1 + 22:.1f}" text-anchor="middle" '
                   f'font-family="monospace" font-size="11">{_fmt(tick)}</text>')
    for tick in _ticks(y_lo, y_hi):
        ty = py(tick)
        out.append(f'<line x1="{x0 - 6:.1f}" y1="{ty:.2f}" x2="{x0:.1f}" y2="{ty:.2f}" '
                   'stroke="#333"/>')
        out.append(f'<text x="{x0 - 10:.1f}" y="{ty + 4:.2f}" text-anchor="end" '
                   f'font-family="monospace" font-size="11">{_fmt(tick)}</text>')
    if x_label:
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle" '
                   f'font-family="monospace" font-size="13">{x_label}</text>')
    if y_label:
        out.append(f'<text x="18" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                   f'font-family="monospace" font-size="13" '
                   f'transform="rotate(-90 18 {(y0 + y1) / 2:.1f})">{y_label}</text>')
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                   'stroke-width="1.5"/>')
        ly = y0 + 16 + 16 * i
        out.append(f'<line x1="{x1 - 150:.1f}" y1="{ly:.1f}" x2="{x1 - 130:.1f}" '
                   f'y2="{ly:.1f}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 - 124:.1f}" y="{ly + 4:.1f}" font-family="monospace" '
                   f'font-size="12">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics_files(paths: list[str | Path], series_key: str, out_path: str | Path,
                       x_key: str = "step", title: str | None = None) -> None:
    """One polyline per metrics file; None values are skipped."""
    available = numeric_keys()
    if series_key not in available:
        raise SeriesError(f"unknown series {series_key!r}; available: "
                          + ", ".join(sorted(available)))
    series = []
    for path in paths:
        header, records = read_metrics(path)
        name = header.get("run") or Path(path).stem
        xs, ys = [], []
        for r in records:
            y = getattr(r, series_key)
            if y is None:
                continue
            xs.append(float(getattr(r, x_key)))
            ys.append(float(y))
        series.append((name, xs, ys))
    svg = render_line_chart(series, title=title or series_key, x_label=x_key,
                            y_label=series_key)
    Path(out_path).write_text(svg, encoding="utf-8")
