"""Report artifacts: comparison tables, epoch curves, metric bars, heatmap overlays.

All renderers are pure: the same input always yields the same bytes.
"""
from __future__ import annotations

import csv
import io
from decimal import ROUND_HALF_UP, Decimal
from xml.sax.saxutils import escape

import numpy as np

from .errors import DimensionError, EmptyInputError, RowError, SchemaError
from .imaging import GrayImage, encode_png, resize_array
from .metrics import ComparisonRow
from .training import format_epoch_log

COMPARISON_HEADER = ("model", "sensitivity", "specificity", "accuracy")


def format_pct(value):
    """One decimal, halves rounded up (92.45 -> 92.5)."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------- comparison

def render_comparison(rows, fmt="csv"):
    cells = [[r.model, format_pct(r.sensitivity), format_pct(r.specificity), format_pct(r.accuracy)]
             for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        w.writerows(cells)
        return buf.getvalue()
    if fmt == "text":
        table = [list(COMPARISON_HEADER)] + cells
        widths = [max(len(r[i]) for r in table) for i in range(4)]
        lines = []
        for r in table:
            first = r[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join([first] + rest).rstrip())
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown comparison format {fmt!r}")


def parse_comparison(text, source="<comparison>"):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip().lower() for h in header[:4]) != COMPARISON_HEADER:
        raise SchemaError(f"{source}: expected header {','.join(COMPARISON_HEADER)}; found {header}")
    rows = []
    for row in reader:
        if not row:
            continue
        try:
            rows.append(ComparisonRow(row[0], float(row[1]), float(row[2]), float(row[3])))
        except (ValueError, IndexError) as exc:
            raise RowError(str(exc), reader.line_num, source) from None
    return rows


# --------------------------------------------------------------------- SVG

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 30, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd")


def _f(v):
    return f"{v:.2f}"


def _svg_open(title):
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="#ffffff"/>',
    ]


def _y_range(values):
    lo = min(values)
    lo = max(0.0, float(np.floor(lo / 5.0) * 5.0) - 5.0)
    return lo, 100.0


def render_epoch_curve(logs, fmt="svg"):
    """Training/validation accuracy per epoch, as CSV or an SVG line chart."""
    if not logs:
        raise EmptyInputError("no epoch logs to render")
    if fmt == "csv":
        return format_epoch_log(logs)
    if fmt != "svg":
        raise ValueError(f"unknown curve format {fmt!r}")
    epochs = [e.epoch for e in logs]
    x0, x1 = min(epochs), max(epochs)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = _y_range([e.train_accuracy for e in logs] + [e.val_accuracy for e in logs])
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(e):
        return _ML + (e - x0) / (x1 - x0) * pw

    def py(v):
        return _MT + (1 - (v - y0) / (y1 - y0)) * ph

    out = _svg_open("Model accuracy")
    out.append(f'<line x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" y2="{_MT + ph}" stroke="#000000"/>')
    out.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" stroke="#000000"/>')
    for k in range(6):
        v = y0 + (y1 - y0) * k / 5
        out.append(f'<text x="{_ML - 6}" y="{_f(py(v) + 4)}" font-size="11" text-anchor="end">{format_pct(v)}</text>')
    for e in sorted(set(epochs)):
        out.append(f'<text x="{_f(px(e))}" y="{_MT + ph + 16}" font-size="11" text-anchor="middle">{e}</text>')
    out.append(f'<text x="{_ML + pw / 2:.0f}" y="{_H - 10}" font-size="13" text-anchor="middle">epoch</text>')
    out.append(f'<text x="16" y="{_MT + ph / 2:.0f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {_MT + ph / 2:.0f})">accuracy (%)</text>')
    series = (("train", "train_accuracy", _COLORS[0]), ("validation", "val_accuracy", _COLORS[1]))
    for i, (label, attr, color) in enumerate(series):
        pts = [(px(e.epoch), py(getattr(e, attr)), e.epoch, getattr(e, attr)) for e in logs]
        last = format_pct(pts[-1][3])
        out.append(f'<g class="series" data-name="{label}" data-last="{last}">')
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="'
                   + " ".join(f"{_f(x)},{_f(y)}" for x, y, _, _ in pts) + '"/>')
        for x, y, ep, v in pts:
            out.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="3" fill="{color}">'
                       f'<title>{label} epoch {ep}: {format_pct(v)}</title></circle>')
        out.append('</g>')
        ly = _MT + 14 + 16 * i
        out.append(f'<rect x="{_ML + pw - 110}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{_ML + pw - 95}" y="{ly}" font-size="12">{label}</text>')
    out.append('</svg>')
    return "\n".join(out) + "\n"


def render_metric_bars(groups, title="Performance"):
    """Grouped bar chart.

    ``groups`` is a list of ``(group_name, {metric_name: percent})`` pairs;
    bar heights are the explicit values given, nothing is derived.
    """
    if not groups:
        raise EmptyInputError("no values to plot")
    metric_names = []
    for _, vals in groups:
        for k in vals:
            if k not in metric_names:
                metric_names.append(k)
    pw, ph = _W - _ML - _MR, _H - _MT - _MB
    out = _svg_open(title)
    out.append(f'<line x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" y2="{_MT + ph}" stroke="#000000"/>')
    out.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" stroke="#000000"/>')
    for k in range(6):
        v = 20 * k
        y = _MT + (1 - v / 100) * ph
        out.append(f'<text x="{_ML - 6}" y="{_f(y + 4)}" font-size="11" text-anchor="end">{v}</text>')
    out.append(f'<text x="16" y="{_MT + ph / 2:.0f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {_MT + ph / 2:.0f})">performance (%)</text>')
    slot = pw / len(groups)
    bar = slot * 0.8 / max(1, len(metric_names))
    for gi, (gname, vals) in enumerate(groups):
        gx = _ML + gi * slot + slot * 0.1
        for mi, m in enumerate(metric_names):
            if m not in vals:
                continue
            v = float(vals[m])
            h = v / 100 * ph
            out.append(f'<rect x="{_f(gx + mi * bar)}" y="{_f(_MT + ph - h)}" width="{_f(bar * 0.9)}" '
                       f'height="{_f(h)}" fill="{_COLORS[mi % len(_COLORS)]}" data-metric="{escape(m)}" '
                       f'data-value="{format_pct(v)}"><title>{escape(gname)} {escape(m)}: '
                       f'{format_pct(v)}</title></rect>')
        out.append(f'<text x="{_f(gx + slot * 0.4)}" y="{_MT + ph + 16}" font-size="10" '
                   f'text-anchor="middle">{escape(gname)}</text>')
    for mi, m in enumerate(metric_names):
        ly = _MT + 14 + 16 * mi
        out.append(f'<rect x="{_ML + pw - 110}" y="{ly - 9}" width="10" height="10" '
                   f'fill="{_COLORS[mi % len(_COLORS)]}"/>')
        out.append(f'<text x="{_ML + pw - 95}" y="{ly}" font-size="12">{escape(m)}</text>')
    out.append('</svg>')
    return "\n".join(out) + "\n"


def comparison_groups(rows):
    return [(r.model, {"sensitivity": r.sensitivity, "specificity": r.specificity,
                       "accuracy": r.accuracy}) for r in rows]


# ----------------------------------------------------------------- overlay

OVERLAY_ALPHA = 0.5


def render_heatmap_overlay(img: GrayImage, prob_map, alpha=OVERLAY_ALPHA) -> bytes:
    """Blend a min-max normalized map as red over the grayscale image; returns PNG bytes.

    A constant map leaves the image unchanged (emitted as gray RGB).
    """
    m = np.asarray(prob_map, dtype=np.float64)
    while m.ndim > 2 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise DimensionError(f"map must be (1, 1, H, W) or (H, W), got {np.shape(prob_map)}")
    if m.shape != (img.height, img.width):
        m = resize_array(m, img.height, img.width)
    if m.shape != (img.height, img.width):
        raise DimensionError(f"map {m.shape} does not match image {img.height}x{img.width}")
    g = img.pixels.astype(np.float64)
    lo, hi = float(m.min()), float(m.max())
    rgb = np.repeat(g[..., None], 3, axis=2)
    if hi > lo:
        a = alpha * (m - lo) / (hi - lo)
        rgb = rgb * (1 - a)[..., None]
        rgb[..., 0] += a * 255
    return encode_png(np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8))
