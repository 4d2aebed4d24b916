"""Hand-rolled SVG reports: line overlays and bar charts.

No imaging dependency; identical inputs produce identical bytes, so the
reports are diffable.
"""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 720, 400
MARGIN = 56
PALETTE = ("#1f5fd0", "#d03a2a", "#1d8a4e", "#b07a13", "#7a3bc4",
           "#0f8f8f", "#c2447e", "#5b5b5b")


def _fmt(v):
    return f"{v:.3f}".rstrip("0").rstrip(".")


def _frame(title):
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
             f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
             f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
             f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
             f'font-family="monospace" font-size="15">{title}</text>']
    return parts


def _axes(parts, x0, y0, x1, y1):
    parts.append(f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
                 f'y2="{HEIGHT - MARGIN}" stroke="black" stroke-width="1"/>')
    parts.append(f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" '
                 f'y2="{HEIGHT - MARGIN}" stroke="black" stroke-width="1"/>')
    for frac in (0.0, 0.5, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        px = MARGIN + frac * (WIDTH - 2 * MARGIN)
        py = HEIGHT - MARGIN - frac * (HEIGHT - 2 * MARGIN)
        parts.append(f'<text x="{px:.1f}" y="{HEIGHT - MARGIN + 18}" '
                     f'text-anchor="middle" font-family="monospace" '
                     f'font-size="11">{_fmt(xv)}</text>')
        parts.append(f'<text x="{MARGIN - 6}" y="{py:.1f}" text-anchor="end" '
                     f'font-family="monospace" font-size="11">{_fmt(yv)}</text>')


def line_plot(series, title="", xlabel="", ylabel=""):
    """series: ordered dict-like name -> (x array, y array). Returns SVG text."""
    if not series:
        raise ValueError("empty plot: no series given")
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    if xs.size == 0:
        raise ValueError("empty plot: series contain no points")
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.04 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2 * MARGIN)

    def py(y):
        return HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2 * MARGIN)

    parts = _frame(title)
    _axes(parts, x0, y0, x1, y1)
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(float(a)):.2f},{py(float(b)):.2f}"
                       for a, b in zip(x, y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = MARGIN + 16 * i
        parts.append(f'<rect x="{WIDTH - MARGIN - 150}" y="{ly - 9}" width="12" '
                     f'height="12" fill="{color}"/>')
        parts.append(f'<text x="{WIDTH - MARGIN - 132}" y="{ly + 2}" '
                     f'font-family="monospace" font-size="12">{name}</text>')
    if xlabel:
        parts.append(f'<text x="{WIDTH // 2}" y="{HEIGHT - 10}" text-anchor="middle" '
                     f'font-family="monospace" font-size="12">{xlabel}</text>')
    if ylabel:
        parts.append(f'<text x="16" y="{HEIGHT // 2}" text-anchor="middle" '
                     f'font-family="monospace" font-size="12" '
                     f'transform="rotate(-90 16 {HEIGHT // 2})">{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_chart(labels, values, title="", ylabel=""):
    if not labels:
        raise ValueError("empty plot: no bars given")
    values = [float(v) for v in values]
    vmax = max(max(values), 0.0)
    vmin = min(min(values), 0.0)
    if vmax == vmin:
        vmax = vmin + 1.0
    span = WIDTH - 2 * MARGIN
    bw = span / len(labels)

    def py(v):
        return HEIGHT - MARGIN - (v - vmin) / (vmax - vmin) * (HEIGHT - 2 * MARGIN)

    parts = _frame(title)
    _axes(parts, 0, vmin, len(labels), vmax)
    for i, (label, v) in enumerate(zip(labels, values)):
        color = PALETTE[i % len(PALETTE)]
        x = MARGIN + i * bw + 0.15 * bw
        y_top = py(max(v, 0.0))
        h = abs(py(0.0) - py(v))
        parts.append(f'<rect x="{x:.2f}" y="{y_top:.2f}" width="{0.7 * bw:.2f}" '
                     f'height="{h:.2f}" fill="{color}"/>')
        parts.append(f'<text x="{x + 0.35 * bw:.2f}" y="{HEIGHT - MARGIN + 18}" '
                     f'text-anchor="middle" font-family="monospace" '
                     f'font-size="11">{label}</text>')
        parts.append(f'<text x="{x + 0.35 * bw:.2f}" y="{y_top - 4:.2f}" '
                     f'text-anchor="middle" font-family="monospace" '
                     f'font-size="10">{_fmt(v)}</text>')
    if ylabel:
        parts.append(f'<text x="16" y="{HEIGHT // 2}" text-anchor="middle" '
                     f'font-family="monospace" font-size="12" '
                     f'transform="rotate(-90 16 {HEIGHT // 2})">{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
