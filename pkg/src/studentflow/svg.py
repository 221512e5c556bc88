"""Bare-bones SVG line charts (polylines, axes, legend); no plotting dependency."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    dash: str | None = None


def _escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace('"', "&quot;"))


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 12))
        v += step
    return out


def _panel(series: Sequence[Series], title: str, ox: float, oy: float, w: float, h: float,
           xlabel: str = "", ylabel: str = "") -> list[str]:
    left, right, top, bottom = ox + 60, ox + w - 15, oy + 35, oy + h - 45
    xs = [v for s in series for v in np.asarray(s.x, float) if math.isfinite(v)]
    ys = [v for s in series for v in np.asarray(s.y, float) if math.isfinite(v)]
    if not xs or not ys:
        return [f'<text x="{ox + w / 2:.1f}" y="{oy + h / 2:.1f}" text-anchor="middle">no data</text>']
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * (right - left)

    def py(y):
        return bottom - (y - y0) / (y1 - y0) * (bottom - top)

    out = [f'<text x="{(left + right) / 2:.1f}" y="{oy + 20:.1f}" text-anchor="middle" '
           f'font-size="14">{_escape(title)}</text>',
           f'<rect x="{left:.1f}" y="{top:.1f}" width="{right - left:.1f}" height="{bottom - top:.1f}" '
           f'fill="none" stroke="#444"/>']
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.1f}" y1="{bottom:.1f}" x2="{px(t):.1f}" y2="{bottom + 4:.1f}" stroke="#444"/>')
        out.append(f'<text x="{px(t):.1f}" y="{bottom + 16:.1f}" text-anchor="middle" font-size="10">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 4:.1f}" y1="{py(t):.1f}" x2="{left:.1f}" y2="{py(t):.1f}" stroke="#444"/>')
        out.append(f'<text x="{left - 6:.1f}" y="{py(t) + 3:.1f}" text-anchor="end" font-size="10">{t:g}</text>')
    if x0 < 0 < x1:
        out.append(f'<line x1="{px(0):.1f}" y1="{top:.1f}" x2="{px(0):.1f}" y2="{bottom:.1f}" stroke="#ccc"/>')
    if y0 < 0 < y1:
        out.append(f'<line x1="{left:.1f}" y1="{py(0):.1f}" x2="{right:.1f}" y2="{py(0):.1f}" stroke="#ccc"/>')
    if xlabel:
        out.append(f'<text x="{(left + right) / 2:.1f}" y="{bottom + 34:.1f}" text-anchor="middle" '
                   f'font-size="11">{_escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="{ox + 14:.1f}" y="{(top + bottom) / 2:.1f}" text-anchor="middle" font-size="11" '
                   f'transform="rotate(-90 {ox + 14:.1f} {(top + bottom) / 2:.1f})">{_escape(ylabel)}</text>')
    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(s.x, s.y)
                       if math.isfinite(a) and math.isfinite(b))
        dash = f' stroke-dasharray="{s.dash}"' if s.dash else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{pts}"/>')
        ly = top + 14 + 14 * i
        out.append(f'<line x1="{right - 110:.1f}" y1="{ly - 4:.1f}" x2="{right - 90:.1f}" y2="{ly - 4:.1f}" '
                   f'stroke="{color}" stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{right - 86:.1f}" y="{ly:.1f}" font-size="10">{_escape(s.label)}</text>')
    return out


def write_panels(path, panels, title: str = "", panel_size=(360, 280), xlabel: str = "",
                 ylabel: str = "") -> Path:
    """Write ``panels`` (a list of ``(title, [Series, ...])``) side by side."""
    pw, ph = panel_size
    head = 30 if title else 0
    width, height = pw * len(panels), ph + head
    body = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
            '<rect width="100%" height="100%" fill="white"/>']
    if title:
        body.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="16">{_escape(title)}</text>')
    for i, (ptitle, series) in enumerate(panels):
        body.extend(_panel(series, ptitle, i * pw, head, pw, ph, xlabel, ylabel))
    body.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(body) + "\n")
    return path


def write_line_chart(path, series: Sequence[Series], title: str = "", xlabel: str = "",
                     ylabel: str = "", size=(720, 420)) -> Path:
    return write_panels(path, [(title, series)], panel_size=size, xlabel=xlabel, ylabel=ylabel)
