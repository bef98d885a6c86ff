"""Minimal static SVG figures: ROC curves and per-target scatter plots.

Lines are drawn inside a group whose transform maps the data box onto the
plot area, so polyline coordinates in the file are the data values
themselves.  Scatter points are placed in pixel space and carry their data
values in ``data-x`` / ``data-y`` attributes.
"""

from __future__ import annotations

from datetime import datetime, timezone
from typing import Optional, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 420
LEFT, TOP, SIZE = 70, 30, 320
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _num(v: float) -> str:
    return f"{float(v):.6g}"


class _Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim: tuple, ylim: tuple):
        self.xlim, self.ylim = xlim, ylim
        self.body = []
        self.overlay = []
        self.legend = []
        self.head = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{LEFT + SIZE / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<rect x="{LEFT}" y="{TOP}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>',
            f'<text x="{LEFT + SIZE / 2}" y="{TOP + SIZE + 38}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="18" y="{TOP + SIZE / 2}" text-anchor="middle" transform="rotate(-90 18 {TOP + SIZE / 2})">{escape(ylabel)}</text>',
        ]
        for i in range(6):
            frac = i / 5
            x = LEFT + frac * SIZE
            y = TOP + SIZE - frac * SIZE
            xv = xlim[0] + frac * (xlim[1] - xlim[0])
            yv = ylim[0] + frac * (ylim[1] - ylim[0])
            self.head.append(f'<text x="{_num(x)}" y="{TOP + SIZE + 16}" text-anchor="middle">{_num(round(xv, 3))}</text>')
            self.head.append(f'<text x="{LEFT - 6}" y="{_num(y + 4)}" text-anchor="end">{_num(round(yv, 3))}</text>')

    def _transform(self) -> str:
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        sx, sy = SIZE / (x1 - x0), SIZE / (y1 - y0)
        return f"translate({_num(LEFT - x0 * sx)} {_num(TOP + SIZE + y0 * sy)}) scale({_num(sx)} {_num(-sy)})"

    def polyline(self, points, color: str, label: Optional[str] = None, dashed: bool = False):
        pts = " ".join(f"{_num(x)},{_num(y)}" for x, y in points)
        dash = ' stroke-dasharray="4 3"' if dashed else ""
        self.body.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5" vector-effect="non-scaling-stroke"{dash}/>')
        if label:
            self.legend.append((label, color))

    def pixel(self, x: float, y: float) -> tuple:
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        return LEFT + (x - x0) / (x1 - x0) * SIZE, TOP + SIZE - (y - y0) / (y1 - y0) * SIZE

    def points(self, xs, ys, color: str, labels: Sequence[str] = ()):
        for i, (x, y) in enumerate(zip(xs, ys)):
            px, py = self.pixel(x, y)
            title = f"<title>{escape(labels[i])}</title>" if i < len(labels) else ""
            self.overlay.append(f'<circle class="point" cx="{_num(px)}" cy="{_num(py)}" r="4" fill="{color}" data-x="{_num(x)}" data-y="{_num(y)}">{title}</circle>')

    def segment(self, x0, y0, x1, y1, color: str = "gray"):
        self.body.append(f'<line x1="{_num(x0)}" y1="{_num(y0)}" x2="{_num(x1)}" y2="{_num(y1)}" stroke="{color}" stroke-width="1" vector-effect="non-scaling-stroke"/>')

    def render(self, meta: bool) -> str:
        out = list(self.head)
        if meta:
            out.insert(1, f"<!-- generated {datetime.now(timezone.utc).isoformat(timespec='seconds')} -->")
        out.append(f'<g transform="{self._transform()}">')
        out += self.body
        out.append("</g>")
        out += self.overlay
        for i, (label, color) in enumerate(self.legend[:20]):
            y = TOP + 12 + 16 * i
            out.append(f'<rect x="{LEFT + SIZE + 10}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
            out.append(f'<text x="{LEFT + SIZE + 24}" y="{y}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


def roc_svg(curves: Sequence[tuple], title: str = "ROC", meta: bool = True) -> str:
    """``curves`` is a sequence of (label, [(fpr, tpr), ...])."""
    c = _Canvas(title, "false positive rate", "true positive rate", (0.0, 1.0), (0.0, 1.0))
    c.polyline([(0, 0), (1, 1)], "gray", dashed=True)
    for i, (label, pts) in enumerate(curves):
        c.polyline(pts, PALETTE[i % len(PALETTE)], label)
    return c.render(meta)


def scatter_svg(xs, ys, labels: Sequence[str], title: str, xlabel: str, ylabel: str, diagonal: bool = False, intervals=None, meta: bool = True) -> str:
    """Labeled points; optional y = x reference and vertical interval bars."""
    values = [v for v in list(xs) + list(ys) if v is not None]
    if intervals:
        values += [v for iv in intervals if iv for v in iv]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if diagonal:
        xlim = ylim = _pad(lo, hi)
    else:
        xlim = _pad(min(xs), max(xs)) if len(xs) else (0.0, 1.0)
        yv = list(ys) + ([v for iv in intervals if iv for v in iv] if intervals else [])
        ylim = _pad(min(yv), max(yv)) if yv else (0.0, 1.0)
    c = _Canvas(title, xlabel, ylabel, xlim, ylim)
    if diagonal:
        c.polyline([(xlim[0], xlim[0]), (xlim[1], xlim[1])], "gray", dashed=True)
    elif ylim[0] < 0 < ylim[1]:
        c.polyline([(xlim[0], 0), (xlim[1], 0)], "gray", dashed=True)
    if intervals:
        for x, iv in zip(xs, intervals):
            if iv:
                c.segment(x, iv[0], x, iv[1])
    c.points(xs, ys, PALETTE[0], labels)
    return c.render(meta)


def _pad(lo: float, hi: float) -> tuple:
    if hi - lo < 1e-9:
        return lo - 0.5, hi + 0.5
    margin = 0.05 * (hi - lo)
    return lo - margin, hi + margin
