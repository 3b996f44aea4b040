"""Minimal SVG line and bar charts, written directly as text.

No plotting stack: output is deterministic, diff-able markup with fixed
margins and a small color palette. Good enough for accuracy-vs-bucket
curves, loss curves, and per-layer rank bars.
"""

from __future__ import annotations

import html
from pathlib import Path

from .errors import ContractError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

WIDTH = 640
HEIGHT = 400
MARGIN_L = 64
MARGIN_R = 24
MARGIN_T = 36
MARGIN_B = 48


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">'
            f'{html.escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle">'
            f'{html.escape(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{html.escape(ylabel)}</text>',
        ]

    def axes(self, xlo, xhi, ylo, yhi):
        x0, x1 = MARGIN_L, WIDTH - MARGIN_R
        y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for tx in _ticks(xlo, xhi):
            px = self.px(tx, xlo, xhi)
            self.parts.append(f'<line x1="{px:.1f}" y1="{y0}" x2="{px:.1f}" y2="{y0 + 4}" stroke="black"/>')
            self.parts.append(f'<text x="{px:.1f}" y="{y0 + 18}" text-anchor="middle">{_fmt(tx)}</text>')
        for ty in _ticks(ylo, yhi):
            py = self.py(ty, ylo, yhi)
            self.parts.append(f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" stroke="black"/>')
            self.parts.append(f'<text x="{x0 - 8}" y="{py + 4:.1f}" text-anchor="end">{_fmt(ty)}</text>')

    @staticmethod
    def px(x, lo, hi):
        span = (hi - lo) or 1.0
        return MARGIN_L + (x - lo) / span * (WIDTH - MARGIN_L - MARGIN_R)

    @staticmethod
    def py(y, lo, hi):
        span = (hi - lo) or 1.0
        return HEIGHT - MARGIN_B - (y - lo) / span * (HEIGHT - MARGIN_T - MARGIN_B)

    def save(self, path):
        self.parts.append("</svg>")
        Path(path).write_text("\n".join(self.parts) + "\n", encoding="utf-8")


def line_chart(series: list[tuple[str, list, list]], path, title: str = "",
               xlabel: str = "", ylabel: str = "", y_range=None) -> None:
    """Plot (label, xs, ys) series as polylines with a small legend."""
    if not series:
        raise ContractError("line_chart needs at least one series")
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    if not all_x:
        raise ContractError("line_chart: empty series")
    xlo, xhi = min(all_x), max(all_x)
    if y_range is not None:
        ylo, yhi = y_range
    else:
        ylo, yhi = min(all_y), max(all_y)
        if ylo == yhi:
            ylo, yhi = ylo - 0.5, yhi + 0.5
    c = _Canvas(title, xlabel, ylabel)
    c.axes(xlo, xhi, ylo, yhi)
    for i, (label, xs, ys) in enumerate(series):
        if len(xs) != len(ys):
            raise ContractError(f"series {label!r}: x and y lengths differ")
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{c.px(x, xlo, xhi):.1f},{c.py(y, ylo, yhi):.1f}"
                       for x, y in zip(xs, ys))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN_T + 14 * i
        c.parts.append(f'<line x1="{WIDTH - MARGIN_R - 120}" y1="{ly}" '
                       f'x2="{WIDTH - MARGIN_R - 100}" y2="{ly}" stroke="{color}" stroke-width="1.5"/>')
        c.parts.append(f'<text x="{WIDTH - MARGIN_R - 94}" y="{ly + 4}">{html.escape(label)}</text>')
    c.save(path)


def bar_chart(labels: list[str], values: list[float], path, title: str = "",
              xlabel: str = "", ylabel: str = "") -> None:
    """Vertical bars, one per label."""
    if not labels or len(labels) != len(values):
        raise ContractError("bar_chart needs matching non-empty labels and values")
    ylo = min(0.0, min(values))
    yhi = max(values) if max(values) > ylo else ylo + 1.0
    c = _Canvas(title, xlabel, ylabel)
    c.axes(0, len(labels), ylo, yhi)
    span = WIDTH - MARGIN_L - MARGIN_R
    bw = span / len(labels)
    for i, (label, v) in enumerate(zip(labels, values)):
        x = MARGIN_L + i * bw + 0.15 * bw
        ytop = c.py(v, ylo, yhi)
        ybase = c.py(max(0.0, ylo), ylo, yhi)
        h = abs(ybase - ytop)
        y = min(ytop, ybase)
        c.parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{0.7 * bw:.1f}" '
                       f'height="{h:.1f}" fill="{PALETTE[0]}"/>')
        lx = MARGIN_L + (i + 0.5) * bw
        c.parts.append(f'<text x="{lx:.1f}" y="{HEIGHT - MARGIN_B + 30}" text-anchor="middle" '
                       f'font-size="10">{html.escape(str(label))}</text>')
    c.save(path)
