"""Standalone SVG charts on a fixed 800x500 canvas."""

from __future__ import annotations

import math
from typing import Sequence

WIDTH, HEIGHT = 800, 500
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 60
PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _num(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    out, v = [], first
    while v <= hi + 1e-9 * step:
        out.append(round(v, 12))
        v += step
    return out


def _label(v: float) -> str:
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim):
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
                      f'viewBox="0 0 {WIDTH} {HEIGHT}">',
                      f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM
        self.parts.append(f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
        for t in _ticks(self.x0, self.x1):
            x = self.px(t)
            self.parts.append(f'<line x1="{_num(x)}" y1="{HEIGHT - BOTTOM}" x2="{_num(x)}" '
                              f'y2="{HEIGHT - BOTTOM + 5}" stroke="black"/>')
            self.parts.append(f'<text x="{_num(x)}" y="{HEIGHT - BOTTOM + 20}" font-size="12" '
                              f'text-anchor="middle">{_label(t)}</text>')
        for t in _ticks(self.y0, self.y1):
            y = self.py(t)
            self.parts.append(f'<line x1="{LEFT - 5}" y1="{_num(y)}" x2="{LEFT}" y2="{_num(y)}" stroke="black"/>')
            self.parts.append(f'<text x="{LEFT - 8}" y="{_num(y + 4)}" font-size="12" '
                              f'text-anchor="end">{_label(t)}</text>')
        self.parts.append(f'<text x="{WIDTH / 2 - RIGHT / 2 + LEFT / 2:.0f}" y="24" font-size="16" '
                          f'text-anchor="middle">{_esc(title)}</text>')
        self.parts.append(f'<text x="{(LEFT + WIDTH - RIGHT) / 2:.0f}" y="{HEIGHT - 15}" font-size="13" '
                          f'text-anchor="middle">{_esc(xlabel)}</text>')
        self.parts.append(f'<text x="18" y="{(TOP + HEIGHT - BOTTOM) / 2:.0f}" font-size="13" '
                          f'text-anchor="middle" transform="rotate(-90 18 {(TOP + HEIGHT - BOTTOM) / 2:.0f})">'
                          f'{_esc(ylabel)}</text>')
        self.legend = 0

    def px(self, v):
        return LEFT + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)

    def py(self, v):
        return HEIGHT - BOTTOM - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)

    def add_legend(self, name: str, color: str):
        y = TOP + 10 + 20 * self.legend
        x = WIDTH - RIGHT + 15
        self.parts.append(f'<rect x="{x}" y="{y}" width="14" height="10" fill="{color}"/>')
        self.parts.append(f'<text x="{x + 20}" y="{y + 10}" font-size="12">{_esc(name)}</text>')
        self.legend += 1

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float], Sequence[float] | None]],
               title: str, xlabel: str, ylabel: str) -> str:
    """``series`` maps a name to ``(x, y, err)``; ``err`` draws a shaded band."""
    xs = [v for x, _, _ in series.values() for v in x]
    ys = []
    for _, y, err in series.values():
        for k, v in enumerate(y):
            e = err[k] if err is not None else 0.0
            ys += [v - e, v + e]
    ys = [v for v in ys if math.isfinite(v)]
    c = _Canvas(title, xlabel, ylabel, (min(xs, default=0), max(xs, default=1)),
                (min(ys, default=0), max(ys, default=1)))
    for k, name in enumerate(sorted(series)):
        x, y, err = series[name]
        color = PALETTE[k % len(PALETTE)]
        pts = [(c.px(a), c.py(b)) for a, b in zip(x, y) if math.isfinite(b)]
        if err is not None and pts:
            upper = [(c.px(a), c.py(b + e)) for a, b, e in zip(x, y, err) if math.isfinite(b)]
            lower = [(c.px(a), c.py(b - e)) for a, b, e in zip(x, y, err) if math.isfinite(b)]
            poly = " ".join(f"{_num(a)},{_num(b)}" for a, b in upper + lower[::-1])
            c.parts.append(f'<polygon points="{poly}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        if pts:
            path = " ".join(f"{_num(a)},{_num(b)}" for a, b in pts)
            c.parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        c.add_legend(name, color)
    return c.render()


def bar_chart(edges: Sequence[float], groups: dict[str, Sequence[float]], title: str,
              xlabel: str, ylabel: str) -> str:
    """Side-by-side bars per bin; ``groups`` maps a name to one height per bin."""
    heights = [v for g in groups.values() for v in g if math.isfinite(v)]
    c = _Canvas(title, xlabel, ylabel, (edges[0], edges[-1]), (0.0, max(heights, default=1.0) or 1.0))
    names = sorted(groups)
    for k, name in enumerate(names):
        color = PALETTE[k % len(PALETTE)]
        for b, h in enumerate(groups[name]):
            if not math.isfinite(h) or h <= 0:
                continue
            lo, hi = c.px(edges[b]), c.px(edges[b + 1])
            w = (hi - lo) / len(names)
            x = lo + k * w
            y = c.py(h)
            c.parts.append(f'<rect x="{_num(x)}" y="{_num(y)}" width="{_num(max(w - 1, 0.5))}" '
                           f'height="{_num(c.py(0) - y)}" fill="{color}"/>')
        c.add_legend(name, color)
    return c.render()
