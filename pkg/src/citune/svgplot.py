"""Minimal deterministic SVG charts (grouped bars and line plots)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]


def _fmt(v):
    return f"{v:.2f}"


def _header(w, h):
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
            f'<rect width="{w}" height="{h}" fill="white"/>']


def _ticks(lo, hi, n=5):
    return np.linspace(lo, hi, n)


def grouped_bars(groups, series, values, title="", ylabel="", width=720, height=360) -> str:
    """values[i, j]: group i, series j."""
    values = np.asarray(values, dtype=float)
    ml, mr, mt, mb = 60, 140, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    top = float(values.max()) * 1.1 if values.size else 1.0
    out = _header(width, height)
    out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for v in _ticks(0.0, top):
        y = mt + ph * (1 - v / top)
        out.append(f'<line x1="{ml}" y1="{_fmt(y)}" x2="{ml + pw}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 5}" y="{_fmt(y + 4)}" text-anchor="end">{v:.3g}</text>')
    gw = pw / max(len(groups), 1)
    bw = 0.8 * gw / max(len(series), 1)
    for i, gname in enumerate(groups):
        x0 = ml + i * gw + 0.1 * gw
        for j in range(len(series)):
            v = values[i, j]
            bh = ph * v / top
            out.append(f'<rect x="{_fmt(x0 + j * bw)}" y="{_fmt(mt + ph - bh)}" width="{_fmt(bw)}" '
                       f'height="{_fmt(bh)}" fill="{PALETTE[j % len(PALETTE)]}"/>')
        out.append(f'<text x="{_fmt(ml + (i + 0.5) * gw)}" y="{height - mb + 16}" '
                   f'text-anchor="middle">{escape(str(gname))}</text>')
    for j, sname in enumerate(series):
        y = mt + 14 * j
        out.append(f'<rect x="{width - mr + 10}" y="{y}" width="10" height="10" fill="{PALETTE[j % len(PALETTE)]}"/>')
        out.append(f'<text x="{width - mr + 25}" y="{y + 9}">{escape(str(sname))}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" transform="rotate(-90 14 {mt + ph / 2})" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_plot(t, curves, labels, title="", ylabel="", log=False, width=720, height=360,
              max_points=1000) -> str:
    """One polyline per curve; optional log10 y axis."""
    t = np.asarray(t, dtype=float)
    step = max(1, t.size // max_points)
    ts = t[::step]
    ys = [np.asarray(c, dtype=float)[::step] for c in curves]
    if log:
        floor = 1e-12
        ys = [np.log10(np.maximum(y, floor)) for y in ys]
    lo = min(float(y.min()) for y in ys)
    hi = max(float(y.max()) for y in ys)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    ml, mr, mt, mb = 60, 140, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    out = _header(width, height)
    out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for v in _ticks(lo, hi):
        y = mt + ph * (1 - (v - lo) / (hi - lo))
        lab = f"1e{v:.1f}" if log else f"{v:.3g}"
        out.append(f'<line x1="{ml}" y1="{_fmt(y)}" x2="{ml + pw}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 5}" y="{_fmt(y + 4)}" text-anchor="end">{lab}</text>')
    for v in _ticks(ts[0], ts[-1]):
        x = ml + pw * (v - ts[0]) / max(ts[-1] - ts[0], 1e-12)
        out.append(f'<text x="{_fmt(x)}" y="{height - mb + 16}" text-anchor="middle">{v:.3g}</text>')
    for j, y in enumerate(ys):
        xs = ml + pw * (ts - ts[0]) / max(ts[-1] - ts[0], 1e-12)
        yy = mt + ph * (1 - (y - lo) / (hi - lo))
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(xs, yy))
        out.append(f'<polyline fill="none" stroke="{PALETTE[j % len(PALETTE)]}" stroke-width="1.2" points="{pts}"/>')
        out.append(f'<rect x="{width - mr + 10}" y="{mt + 14 * j}" width="10" height="10" '
                   f'fill="{PALETTE[j % len(PALETTE)]}"/>')
        out.append(f'<text x="{width - mr + 25}" y="{mt + 14 * j + 9}">{escape(str(labels[j]))}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 6}" text-anchor="middle">t [s]</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" transform="rotate(-90 14 {mt + ph / 2})" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
