"""Minimal static SVG 1.1 line charts (axes, polylines, optional min/max bands)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]
    lo: list[float] | None = None  # band, e.g. min over seeds
    hi: list[float] | None = None


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step - 1e-9) * step
    out, t = [], start
    while t <= hi + 1e-9 * step:
        out.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return out


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _label(v: float) -> str:
    return f"{v:.3g}"


def line_chart(series: list[Series], title: str = "", xlabel: str = "", ylabel: str = "",
               width: int = 640, height: int = 400, markers: bool = True) -> str:
    pts = [(x, y) for s in series for x, y in zip(s.x, s.y) if math.isfinite(x) and math.isfinite(y)]
    for s in series:
        for band in (s.lo, s.hi):
            if band:
                pts += [(x, y) for x, y in zip(s.x, band) if math.isfinite(y)]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    ml, mr, mt, mb = 70, 150, 40, 55
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_fmt(sx(t))}" y1="{mt + ph}" x2="{_fmt(sx(t))}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(sx(t))}" y="{mt + ph + 18}" text-anchor="middle">{_label(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{ml - 5}" y1="{_fmt(sy(t))}" x2="{ml + pw}" y2="{_fmt(sy(t))}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 8}" y="{_fmt(sy(t) + 4)}" text-anchor="end">{_label(t)}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')

    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        if s.lo and s.hi:
            upper = [f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(s.x, s.hi)]
            lower = [f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(reversed(s.x), reversed(s.lo))]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = [f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(s.x, s.y) if math.isfinite(y)]
        out.append(f'<polyline points="{" ".join(line)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if markers and len(line) <= 40:
            for p in line:
                cx, cy = p.split(",")
                out.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>')
        ly = mt + 14 + 18 * k
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly - 4}" x2="{ml + pw + 32}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 38}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, *args, **kwargs) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(line_chart(*args, **kwargs))
