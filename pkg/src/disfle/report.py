"""Plain SVG line plots with bands, and markdown report tables.

Plots are written by hand rather than through a plotting library so that the
output is byte-stable and diffable: every coordinate is printed at a fixed
precision and elements appear in input order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
WIDTH, HEIGHT = 640, 420
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom

# published values shown next to the computed summary (ages 50 and 65)
REFERENCE_DISFLE = {(50, "Men"): 14.5, (50, "Women"): 17.6, (65, "Men"): 8.9, (65, "Women"): 10.8}
REFERENCE_HLY = {(50, "Men"): 18.8, (50, "Women"): 19.9, (65, "Men"): 9.5, (65, "Women"): 10.2}


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    step: bool = True
    dashed: bool = False


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 6) -> np.ndarray:
    span = hi - lo
    raw = span / max(n - 1, 1)
    mag = 10 ** np.floor(np.log10(raw)) if raw > 0 else 1.0
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    first = np.ceil(lo / step) * step
    return np.arange(first, hi + step * 1e-9, step)


def _step_xy(x, y, x_end=None):
    """Vertices of a right-continuous step function drawn from ``x[0]``."""
    xs, ys = [x[0]], [y[0]]
    for k in range(1, len(x)):
        xs += [x[k], x[k]]
        ys += [y[k - 1], y[k]]
    if x_end is not None and x_end > xs[-1]:
        xs.append(x_end)
        ys.append(ys[-1])
    return np.asarray(xs), np.asarray(ys)


def line_plot_svg(
    series: Sequence[Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    xlim: tuple[float, float] | None = None,
    ylim: tuple[float, float] | None = None,
) -> str:
    """Render series (with optional shaded bands) as a standalone SVG document."""
    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom
    xs = [s.x for s in series if len(s.x)]
    ys = [a for s in series for a in (s.y, s.lower, s.upper) if a is not None and len(a)]
    if xlim is None:
        xlim = (float(min(a.min() for a in xs)), float(max(a.max() for a in xs))) if xs else (0.0, 1.0)
    if ylim is None:
        ylim = (float(min(a.min() for a in ys)), float(max(a.max() for a in ys))) if ys else (0.0, 1.0)
    if xlim[1] <= xlim[0]:
        xlim = (xlim[0], xlim[0] + 1.0)
    if ylim[1] <= ylim[0]:
        ylim = (ylim[0] - 0.5, ylim[0] + 0.5)

    def px(v):
        return left + (np.asarray(v, dtype=float) - xlim[0]) / (xlim[1] - xlim[0]) * pw

    def py(v):
        return top + (1 - (np.asarray(v, dtype=float) - ylim[0]) / (ylim[1] - ylim[0])) * ph

    def path(x, y):
        return "M" + " L".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px(x), py(y)))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="white" stroke="#444"/>',
    ]
    for t in _ticks(*xlim):
        x = _fmt(px(t))
        out.append(f'<line x1="{x}" y1="{top + ph}" x2="{x}" y2="{top + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{x}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(*ylim):
        y = _fmt(py(t))
        out.append(f'<line x1="{left - 4}" y1="{y}" x2="{left}" y2="{y}" stroke="#444"/>')
        out.append(f'<text x="{left - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">{t:g}</text>')
    if title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="{top - 10}" text-anchor="middle" '
                   f'font-size="13">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{left + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{top + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {top + ph / 2:.2f})">{escape(ylabel)}</text>')

    for k, s in enumerate(series):
        if not len(s.x):
            continue
        color = PALETTE[k % len(PALETTE)]
        x, y = np.asarray(s.x, dtype=float), np.asarray(s.y, dtype=float)
        if s.lower is not None and s.upper is not None:
            lo, hi = np.asarray(s.lower, dtype=float), np.asarray(s.upper, dtype=float)
            if s.step:
                bx, bl = _step_xy(x, lo)
                _, bh = _step_xy(x, hi)
            else:
                bx, bl, bh = x, lo, hi
            poly = path(np.concatenate([bx, bx[::-1]]), np.concatenate([bh, bl[::-1]])) + " Z"
            out.append(f'<path d="{poly}" fill="{color}" fill-opacity="0.18" stroke="none"/>')
        if s.step:
            x, y = _step_xy(x, y)
        dash = ' stroke-dasharray="5,3"' if s.dashed else ""
        out.append(f'<path d="{path(x, y)}" fill="none" stroke="{color}" stroke-width="1.5"{dash}>'
                   f'<title>{escape(s.label)}</title></path>')
        ly = top + 14 + 14 * k
        out.append(f'<line x1="{left + pw - 150}" y1="{ly}" x2="{left + pw - 130}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{left + pw - 125}" y="{ly}" dominant-baseline="middle">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_paths(svg: str) -> list[str]:
    """``d`` attributes of all paths, for structural comparison in tests."""
    import re

    return re.findall(r' d="([^"]*)"', svg)


# --------------------------------------------------------------------------- tables

def markdown_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def disfle_summary_rows(values: Mapping[tuple[int, str], float]) -> list[tuple]:
    """Rows ``(Age, Sex, Dis-FLE, published Dis-FLE, HLY)`` sorted by age then sex.

    ``values`` maps ``(age, "Men" | "Women")`` to a computed Dis-FLE; the
    published columns are left blank for ages without a reference value.
    """
    rows = []
    for (age, sex) in sorted(values):
        ref = REFERENCE_DISFLE.get((age, sex))
        hly = REFERENCE_HLY.get((age, sex))
        rows.append((
            age, sex, f"{values[(age, sex)]:.1f}",
            "" if ref is None else f"{ref:.1f}", "" if hly is None else f"{hly:.1f}",
        ))
    return rows


def disfle_summary_markdown(values: Mapping[tuple[int, str], float]) -> str:
    return markdown_table(
        ("Age", "Sex", "Dis-FLE", "Published Dis-FLE", "HLY"), disfle_summary_rows(values)
    )
