"""Minimal self-contained SVG charts.

Each file carries its data table in a leading comment so the figure can be
regenerated without the run that produced it. No timestamps are written, so
identical data gives byte-identical files.
"""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _fmt(v):
    return f"{v:.6g}"


def _data_comment(header, rows):
    lines = [",".join(header)] + [",".join(_fmt(c) if isinstance(c, float) else str(c)
                                           for c in r) for r in rows]
    body = "\n".join(lines).replace("--", "- -")
    return f"<!-- data\n{body}\n-->"


def _scale(lo, hi):
    if not math.isfinite(lo) or not math.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(title, xlabel, ylabel, y_lo, y_hi):
    left, right, top, bottom = MARGIN
    x1, y1 = WIDTH - right, HEIGHT - bottom
    out = [f'<rect x="{left}" y="{top}" width="{x1 - left}" height="{y1 - top}" '
           f'fill="none" stroke="#333"/>',
           f'<text x="{WIDTH / 2}" y="{top - 10}" text-anchor="middle" '
           f'font-size="14">{escape(title)}</text>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" '
           f'font-size="12">{escape(xlabel)}</text>',
           f'<text x="15" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 15 {HEIGHT / 2})">{escape(ylabel)}</text>']
    for i in range(5):
        v = y_lo + (y_hi - y_lo) * i / 4
        y = y1 - (y1 - top) * i / 4
        out.append(f'<text x="{left - 5}" y="{y + 4:.1f}" text-anchor="end" '
                   f'font-size="10">{_fmt(v)}</text>')
    return out


def _document(comment, parts):
    return ("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n" + comment + "\n"
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n' + "\n".join(parts) + "\n</svg>\n")


def line_plot(path, series, title="", xlabel="", ylabel=""):
    """``series`` maps a label to a list of (x, y) points."""
    rows = [(label, float(x), float(y)) for label, pts in series.items() for x, y in pts]
    xs = [r[1] for r in rows] or [0.0]
    ys = [r[2] for r in rows] or [0.0]
    x_lo, x_hi = _scale(min(xs), max(xs))
    y_lo, y_hi = _scale(min(ys), max(ys))
    left, right, top, bottom = MARGIN
    x1, y1 = WIDTH - right, HEIGHT - bottom

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * (x1 - left)

    def py(y):
        return y1 - (y - y_lo) / (y_hi - y_lo) * (y1 - top)

    parts = _frame(title, xlabel, ylabel, y_lo, y_hi)
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{px(float(x)):.2f},{py(float(y)):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{coords}"/>')
        parts.append(f'<text x="{x1 - 5}" y="{top + 15 + 14 * i}" text-anchor="end" '
                     f'font-size="11" fill="{color}">{escape(str(label))}</text>')
    text = _document(_data_comment(("series", "x", "y"), rows), parts)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def bar_plot(path, labels, values, title="", ylabel=""):
    values = [float(v) for v in values]
    y_lo, y_hi = 0.0, max(values + [0.0]) * 1.1 or 1.0
    left, right, top, bottom = MARGIN
    x1, y1 = WIDTH - right, HEIGHT - bottom
    parts = _frame(title, "", ylabel, y_lo, y_hi)
    n = max(len(values), 1)
    slot = (x1 - left) / n
    for i, (label, v) in enumerate(zip(labels, values)):
        h = (v - y_lo) / (y_hi - y_lo) * (y1 - top)
        x = left + i * slot + slot * 0.15
        parts.append(f'<rect x="{x:.2f}" y="{y1 - h:.2f}" width="{slot * 0.7:.2f}" '
                     f'height="{h:.2f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        parts.append(f'<text x="{x + slot * 0.35:.2f}" y="{y1 + 14}" text-anchor="middle" '
                     f'font-size="11">{escape(str(label))}</text>')
    rows = [(str(label), v) for label, v in zip(labels, values)]
    text = _document(_data_comment(("label", "value"), rows), parts)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path
