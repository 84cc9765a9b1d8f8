"""Tiny deterministic SVG chart writer.

Produces plain hand-assembled SVG text (no imaging dependency) so report
outputs are stable byte-for-byte and diff cleanly in review. Supports
single line/scatter charts and grids of small-multiple panels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
]


@dataclass
class Series:
    label: str
    xs: list
    ys: list
    color: str | None = None
    dashed: bool = False
    markers: bool = False
    line: bool = True


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _nice_step(span: float) -> float:
    if span <= 0:
        return 1.0
    raw = span / 4.0
    mag = 10.0 ** __import__("math").floor(__import__("math").log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            return mult * mag
    return 10.0 * mag


def _ticks(lo: float, hi: float):
    if lo == hi:
        pad = abs(lo) * 0.1 or 1.0
        lo, hi = lo - pad, hi + pad
    step = _nice_step(hi - lo)
    import math

    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + step * 1e-9:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return lo, hi, ticks


def _data_bounds(series, pick):
    vals = [v for s in series for v in pick(s)]
    if not vals:
        return 0.0, 1.0
    return min(vals), max(vals)


class _Canvas:
    def __init__(self):
        self.parts = []

    def add(self, element: str):
        self.parts.append(element)

    def text(self, x, y, s, size=11, anchor="start", color="#333333", rotate=None):
        tr = f' transform="rotate(-90 {_fmt(x)} {_fmt(y)})"' if rotate else ""
        self.add(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="Helvetica,Arial,sans-serif" fill="{color}" '
            f'text-anchor="{anchor}"{tr}>{_escape(s)}</text>'
        )


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _draw_axes(c, x0, y0, w, h, xlo, xhi, ylo, yhi, xticks, yticks, xlabel, ylabel):
    c.add(f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="#fcfcfc" stroke="#cccccc"/>')

    def sx(v):
        return x0 + (v - xlo) / (xhi - xlo) * w

    def sy(v):
        return y0 + h - (v - ylo) / (yhi - ylo) * h

    for t in xticks:
        px = sx(t)
        c.add(f'<line x1="{_fmt(px)}" y1="{y0 + h}" x2="{_fmt(px)}" y2="{y0 + h + 4}" stroke="#666666"/>')
        c.add(f'<line x1="{_fmt(px)}" y1="{y0}" x2="{_fmt(px)}" y2="{y0 + h}" stroke="#eeeeee"/>')
        c.text(px, y0 + h + 16, _fmt(t), size=10, anchor="middle")
    for t in yticks:
        py = sy(t)
        c.add(f'<line x1="{x0 - 4}" y1="{_fmt(py)}" x2="{x0}" y2="{_fmt(py)}" stroke="#666666"/>')
        c.add(f'<line x1="{x0}" y1="{_fmt(py)}" x2="{x0 + w}" y2="{_fmt(py)}" stroke="#eeeeee"/>')
        c.text(x0 - 7, py + 3.5, _fmt(t), size=10, anchor="end")
    if xlabel:
        c.text(x0 + w / 2, y0 + h + 32, xlabel, anchor="middle")
    if ylabel:
        c.text(x0 - 42, y0 + h / 2, ylabel, anchor="middle", rotate=True)
    return sx, sy


def _draw_series(c, series, sx, sy):
    for i, s in enumerate(series):
        color = s.color or PALETTE[i % len(PALETTE)]
        pts = [(sx(x), sy(y)) for x, y in zip(s.xs, s.ys)]
        if s.line and len(pts) > 1:
            path = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in pts)
            dash = ' stroke-dasharray="5,3"' if s.dashed else ""
            c.add(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        if s.markers or not s.line or len(pts) == 1:
            for px, py in pts:
                c.add(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="3" fill="{color}"/>')


def _legend(c, series, x, y):
    for i, s in enumerate(series):
        color = s.color or PALETTE[i % len(PALETTE)]
        yy = y + 14 * i
        c.add(f'<line x1="{x}" y1="{yy - 3}" x2="{x + 18}" y2="{yy - 3}" stroke="{color}" stroke-width="2"/>')
        c.text(x + 23, yy, s.label, size=10)


def line_chart(series, title="", xlabel="", ylabel="", width=640, height=420, legend=True) -> str:
    margin_l, margin_r, margin_t, margin_b = 64, 140 if legend else 20, 34, 46
    plot_w, plot_h = width - margin_l - margin_r, height - margin_t - margin_b
    xlo, xhi = _data_bounds(series, lambda s: s.xs)
    ylo, yhi = _data_bounds(series, lambda s: s.ys)
    xlo, xhi, xticks = _ticks(xlo, xhi)
    ylo, yhi, yticks = _ticks(ylo, yhi)
    c = _Canvas()
    if title:
        c.text(width / 2, 20, title, size=13, anchor="middle")
    sx, sy = _draw_axes(c, margin_l, margin_t, plot_w, plot_h, xlo, xhi, ylo, yhi, xticks, yticks, xlabel, ylabel)
    _draw_series(c, series, sx, sy)
    if legend:
        _legend(c, series, margin_l + plot_w + 12, margin_t + 14)
    return _document(width, height, c)


def panel_grid(panels, cols=4, panel_width=200, panel_height=150, title="") -> str:
    """Grid of mini line charts: panels is a list of (subtitle, series list)."""
    import math

    rows = math.ceil(len(panels) / cols)
    top = 28 if title else 6
    width = cols * panel_width + 16
    height = top + rows * panel_height + 10
    c = _Canvas()
    if title:
        c.text(width / 2, 18, title, size=13, anchor="middle")
    for i, (subtitle, series) in enumerate(panels):
        r, col = divmod(i, cols)
        ox = 8 + col * panel_width
        oy = top + r * panel_height
        mx, mt, mw, mh = 34, 18, panel_width - 46, panel_height - 40
        xlo, xhi = _data_bounds(series, lambda s: s.xs)
        ylo, yhi = _data_bounds(series, lambda s: s.ys)
        xlo, xhi, xticks = _ticks(xlo, xhi)
        ylo, yhi, yticks = _ticks(ylo, yhi)
        c.text(ox + mx + mw / 2, oy + 12, subtitle, size=10, anchor="middle")
        sx, sy = _draw_axes(
            c, ox + mx, oy + mt, mw, mh, xlo, xhi, ylo, yhi, xticks[:: max(1, len(xticks) - 1)],
            yticks[:: max(1, len(yticks) - 1)], "", "",
        )
        _draw_series(c, series, sx, sy)
    return _document(width, height, c)


def _document(width, height, canvas) -> str:
    body = "\n".join(canvas.parts)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>\n'
        f"{body}\n</svg>\n"
    )


def write_svg(path, svg_text: str) -> None:
    with open(path, "w") as f:
        f.write(svg_text)
