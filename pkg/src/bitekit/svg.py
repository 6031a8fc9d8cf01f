"""Standalone SVG figures: event-study coefficients and sensitivity panels.

Output is plain text built from fixed-precision numbers, so identical
inputs give byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

PANEL_W, PANEL_H = 360, 250
MARGIN = dict(left=56, right=14, top=30, bottom=40)
COLORS = ("#1f4e79", "#b03a2e", "#2e7d32", "#6a1b9a")


def _f(v: float) -> str:
    return f"{v:.2f}"


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    """Round tick values covering [lo, hi]."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("axis limits must be finite")
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + step * 1e-9:
        ticks.append(round(t, 12))
        t += step
    if ticks[-1] < hi:
        ticks.append(round(t, 12))
    return ticks


def _label(v: float) -> str:
    s = f"{v:.3g}"
    return "0" if s in ("-0", "0") else s


@dataclass
class _Panel:
    x0: float
    y0: float
    xlim: tuple
    ylim: tuple
    w: float = PANEL_W
    h: float = PANEL_H

    @property
    def inner(self):
        return (
            self.x0 + MARGIN["left"],
            self.y0 + MARGIN["top"],
            self.w - MARGIN["left"] - MARGIN["right"],
            self.h - MARGIN["top"] - MARGIN["bottom"],
        )

    def x(self, v: float) -> float:
        left, _, width, _ = self.inner
        a, b = self.xlim
        return left + (v - a) / (b - a) * width

    def y(self, v: float) -> float:
        _, top, _, height = self.inner
        a, b = self.ylim
        return top + (b - v) / (b - a) * height

    def frame(self, title: str, xlabel: str, xticks, yticks, xfmt=_label) -> list[str]:
        left, top, width, height = self.inner
        out = [
            f'<rect x="{_f(left)}" y="{_f(top)}" width="{_f(width)}" height="{_f(height)}" fill="none" stroke="#444" stroke-width="0.8"/>',
            f'<text x="{_f(left + width / 2)}" y="{_f(self.y0 + 18)}" text-anchor="middle" font-size="13" font-weight="bold">{escape(title)}</text>',
            f'<text x="{_f(left + width / 2)}" y="{_f(top + height + 32)}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        ]
        for t in yticks:
            yy = self.y(t)
            out.append(f'<line x1="{_f(left - 4)}" y1="{_f(yy)}" x2="{_f(left)}" y2="{_f(yy)}" stroke="#444" stroke-width="0.8"/>')
            out.append(f'<text x="{_f(left - 7)}" y="{_f(yy + 3.5)}" text-anchor="end" font-size="10">{_label(t)}</text>')
        for t in xticks:
            xx = self.x(t)
            out.append(f'<line x1="{_f(xx)}" y1="{_f(top + height)}" x2="{_f(xx)}" y2="{_f(top + height + 4)}" stroke="#444" stroke-width="0.8"/>')
            out.append(f'<text x="{_f(xx)}" y="{_f(top + height + 15)}" text-anchor="middle" font-size="10">{xfmt(t)}</text>')
        return out

    def zero_line(self) -> str:
        left, _, width, _ = self.inner
        yy = self.y(0.0)
        return f'<line class="zero" x1="{_f(left)}" y1="{_f(yy)}" x2="{_f(left + width)}" y2="{_f(yy)}" stroke="#888" stroke-width="1" stroke-dasharray="4 3"/>'

    def interval(self, xv: float, lo: float, hi: float, mid: float | None, color: str, cap: float = 3.0) -> list[str]:
        xx, ylo, yhi = self.x(xv), self.y(lo), self.y(hi)
        out = [
            f'<line x1="{_f(xx)}" y1="{_f(ylo)}" x2="{_f(xx)}" y2="{_f(yhi)}" stroke="{color}" stroke-width="1.4"/>',
            f'<line x1="{_f(xx - cap)}" y1="{_f(ylo)}" x2="{_f(xx + cap)}" y2="{_f(ylo)}" stroke="{color}" stroke-width="1.2"/>',
            f'<line x1="{_f(xx - cap)}" y1="{_f(yhi)}" x2="{_f(xx + cap)}" y2="{_f(yhi)}" stroke="{color}" stroke-width="1.2"/>',
        ]
        if mid is not None:
            out.append(f'<circle cx="{_f(xx)}" cy="{_f(self.y(mid))}" r="2.6" fill="{color}"/>')
        return out


def _ylim(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray([x for x in values if math.isfinite(x)] + [0.0], dtype=float)
    lo, hi = float(v.min()), float(v.max())
    pad = 0.08 * (hi - lo) if hi > lo else 0.5
    return lo - pad, hi + pad


def _document(width: float, height: float, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="Helvetica, Arial, sans-serif">'
    )
    return "\n".join([head, f'<rect width="{_f(width)}" height="{_f(height)}" fill="white"/>', *body, "</svg>"]) + "\n"


def event_study_svg(
    panels: Mapping[str, pd.DataFrame],
    path=None,
    reference_year: int | None = None,
    columns: int = 2,
) -> str:
    """One panel per entry; each frame has year, estimate, ci_low, ci_high.

    A dotted vertical line marks the reference year when given.
    """
    items = list(panels.items())
    if not items:
        raise ValueError("nothing to plot")
    cols = min(columns, len(items))
    rows = math.ceil(len(items) / cols)
    body = []
    for i, (title, df) in enumerate(items):
        df = df.sort_values("year")
        years = df["year"].to_numpy(dtype=float)
        xlim = (float(years.min()) - 0.7, float(years.max()) + 0.7)
        ylim = _ylim(list(df["ci_low"]) + list(df["ci_high"]) + list(df["estimate"]))
        yt = nice_ticks(*ylim)
        ylim = (min(ylim[0], yt[0]), max(ylim[1], yt[-1]))
        p = _Panel((i % cols) * PANEL_W, (i // cols) * PANEL_H, xlim, ylim)
        step = max(1, int(math.ceil(len(years) / 8)))
        body += p.frame(title, "year", years[::step], yt, xfmt=lambda t: str(int(t)))
        body.append(p.zero_line())
        if reference_year is not None:
            _, top, _, height = p.inner
            xx = p.x(reference_year)
            body.append(f'<line x1="{_f(xx)}" y1="{_f(top)}" x2="{_f(xx)}" y2="{_f(top + height)}" stroke="#bbb" stroke-dasharray="1 2"/>')
        color = COLORS[i % len(COLORS)]
        for r in df.itertuples(index=False):
            body += p.interval(float(r.year), float(r.ci_low), float(r.ci_high), float(r.estimate), color)
    text = _document(cols * PANEL_W, rows * PANEL_H, body)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def sensitivity_svg(curves: Mapping[str, Sequence], path=None, labels: Mapping[str, str] | None = None, columns: int = 2) -> str:
    """Robust intervals against mbar, one panel per measure.

    ``curves`` maps a measure to a sequence of objects with ``mbar``,
    ``lower`` and ``upper`` attributes.
    """
    items = list(curves.items())
    if not items:
        raise ValueError("nothing to plot")
    labels = labels or {}
    cols = min(columns, len(items))
    rows = math.ceil(len(items) / cols)
    body = []
    for i, (measure, curve) in enumerate(items):
        m = np.array([c.mbar for c in curve], dtype=float)
        lo = [float(c.lower) for c in curve]
        hi = [float(c.upper) for c in curve]
        span = float(m.max() - m.min())
        pad = 0.06 * span if span > 0 else 0.5
        xlim = (float(m.min()) - pad, float(m.max()) + pad)
        ylim = _ylim(lo + hi)
        yt = nice_ticks(*ylim)
        ylim = (min(ylim[0], yt[0]), max(ylim[1], yt[-1]))
        p = _Panel((i % cols) * PANEL_W, (i // cols) * PANEL_H, xlim, ylim)
        xt = nice_ticks(float(m.min()), float(m.max())) if span > 0 else [float(m[0])]
        body += p.frame(labels.get(measure, measure), "M-bar", xt, yt)
        body.append(p.zero_line())
        color = COLORS[i % len(COLORS)]
        for mv, a, b in zip(m, lo, hi):
            body += p.interval(float(mv), a, b, (a + b) / 2, color)
    text = _document(cols * PANEL_W, rows * PANEL_H, body)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
