"""Minimal static SVG charts: quantile ribbons and line plots."""

from __future__ import annotations

from html import escape
from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=60, right=20, top=30, bottom=45)
COLOURS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


class _Frame:
    def __init__(self, x, ys):
        x = np.asarray(x, dtype=float)
        finite = np.concatenate([np.ravel(y)[np.isfinite(np.ravel(y))] for y in ys] + [np.zeros(0)])
        self.x0, self.x1 = float(x.min()), float(x.max())
        if self.x0 == self.x1:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        self.y0 = float(finite.min()) if finite.size else 0.0
        self.y1 = float(finite.max()) if finite.size else 1.0
        if self.y0 == self.y1:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        pad = 0.05 * (self.y1 - self.y0)
        self.y0 -= pad
        self.y1 += pad

    def px(self, x):
        span = WIDTH - MARGIN["left"] - MARGIN["right"]
        return MARGIN["left"] + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * span

    def py(self, y):
        span = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        return HEIGHT - MARGIN["bottom"] - (np.asarray(y, float) - self.y0) / (self.y1 - self.y0) * span


def _points(xs, ys) -> str:
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys) if np.isfinite(y))


def _axes(frame: _Frame, title: str, xlabel: str, ylabel: str) -> list[str]:
    bottom, left = HEIGHT - MARGIN["bottom"], MARGIN["left"]
    out = [
        f'<line x1="{left}" y1="{bottom}" x2="{WIDTH - MARGIN["right"]}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(frame.x0, frame.x1, 5):
        out.append(f'<text x="{frame.px(v):.1f}" y="{bottom + 14}" text-anchor="middle" '
                   f'font-size="9">{v:.3g}</text>')
    for v in np.linspace(frame.y0, frame.y1, 5):
        out.append(f'<text x="{left - 4}" y="{frame.py(v) + 3:.1f}" text-anchor="end" '
                   f'font-size="9">{v:.3g}</text>')
    return out


def _write(path, body: list[str]) -> None:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    Path(path).write_text("\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body,
                                     "</svg>", ""]), encoding="utf-8")


def ribbon_plot(path, x, bands, title="", xlabel="", ylabel="") -> None:
    """Nested quantile ribbons.

    ``bands`` has shape (2 * n + 1, len(x)): ascending quantiles whose outer
    pairs become ribbons around the middle row, drawn as a line.
    """
    bands = np.asarray(bands, dtype=float)
    x = np.asarray(x, dtype=float)
    frame = _Frame(x, [bands])
    body = _axes(frame, title, xlabel, ylabel)
    n = bands.shape[0] // 2
    for i in range(n):
        lo, hi = bands[i], bands[-1 - i]
        pts = _points(frame.px(x), frame.py(hi)) + " " + _points(frame.px(x[::-1]), frame.py(lo[::-1]))
        body.append(f'<polygon points="{pts}" fill="{COLOURS[0]}" fill-opacity="{0.2 + 0.2 * i:.2f}"/>')
    body.append(f'<polyline points="{_points(frame.px(x), frame.py(bands[n]))}" fill="none" '
                f'stroke="{COLOURS[0]}" stroke-width="2"/>')
    _write(path, body)


def line_plot(path, x, series: dict, title="", xlabel="", ylabel="", errors: dict | None = None) -> None:
    """One line per entry of ``series``, with optional symmetric error bars."""
    x = np.asarray(x, dtype=float)
    errors = errors or {}
    ys = [np.asarray(v, float) for v in series.values()]
    ys += [np.asarray(series[k], float) + s * np.asarray(e, float) for k, e in errors.items() for s in (-1, 1)]
    frame = _Frame(x, ys)
    body = _axes(frame, title, xlabel, ylabel)
    if frame.y0 < 0 < frame.y1:
        body.append(f'<line x1="{MARGIN["left"]}" y1="{frame.py(0):.1f}" x2="{WIDTH - MARGIN["right"]}" '
                    f'y2="{frame.py(0):.1f}" stroke="grey" stroke-dasharray="4 3"/>')
    for i, (name, y) in enumerate(series.items()):
        colour = COLOURS[i % len(COLOURS)]
        y = np.asarray(y, float)
        body.append(f'<polyline points="{_points(frame.px(x), frame.py(y))}" fill="none" '
                    f'stroke="{colour}" stroke-width="2"/>')
        for xi, yi in zip(frame.px(x), frame.py(y)):
            if np.isfinite(yi):
                body.append(f'<circle cx="{xi:.2f}" cy="{yi:.2f}" r="3" fill="{colour}"/>')
        if name in errors:
            for xi, yi, ei in zip(x, y, np.asarray(errors[name], float)):
                body.append(f'<line x1="{frame.px(xi):.2f}" y1="{frame.py(yi - ei):.2f}" '
                            f'x2="{frame.px(xi):.2f}" y2="{frame.py(yi + ei):.2f}" stroke="{colour}"/>')
        body.append(f'<text x="{WIDTH - MARGIN["right"] - 4}" y="{MARGIN["top"] + 12 + 13 * i}" '
                    f'text-anchor="end" font-size="10" fill="{colour}">{escape(str(name))}</text>')
    _write(path, body)
