"""Hand-emitted SVG: scatter/line plots and landmark/grid overlays.

Emission is a pure function of the supplied data: identical inputs produce
identical bytes.
"""

from __future__ import annotations

import numpy as np

_W, _H = 480, 360
_MARGIN = 56


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _axis_range(values, pad_frac=0.08):
    lo, hi = float(min(values)), float(max(values))
    if hi - lo < 1e-12:
        lo -= 0.5
        hi += 0.5
    pad = (hi - lo) * pad_frac
    return lo - pad, hi + pad


def _ticks(lo, hi, count=5):
    raw = np.linspace(lo, hi, count)
    return [float(f"{t:.3g}") for t in raw]


class _Canvas:
    def __init__(self, width=_W, height=_H):
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
                      f'width="{width}" height="{height}" '
                      f'viewBox="0 0 {width} {height}">',
                      f'<rect width="{width}" height="{height}" fill="white"/>']

    def add(self, element: str):
        self.parts.append(element)

    def text(self, x, y, s, size=12, anchor="start", rotate=None):
        extra = f' transform="rotate(-90 {_fmt(x)} {_fmt(y)})"' if rotate else ""
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
                 f'font-family="sans-serif" text-anchor="{anchor}"{extra}>{s}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"])


def _plot_frame(canvas, xlim, ylim, xlabel, ylabel, title):
    x0, y0 = _MARGIN, _H - _MARGIN
    x1, y1 = _W - _MARGIN // 2, _MARGIN // 2

    def to_px(x, y):
        px = x0 + (x - xlim[0]) / (xlim[1] - xlim[0]) * (x1 - x0)
        py = y0 - (y - ylim[0]) / (ylim[1] - ylim[0]) * (y0 - y1)
        return px, py

    canvas.add(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
               f'fill="none" stroke="black"/>')
    for t in _ticks(*xlim):
        px, _ = to_px(t, ylim[0])
        canvas.add(f'<line x1="{_fmt(px)}" y1="{y0}" x2="{_fmt(px)}" y2="{y0 + 4}" '
                   f'stroke="black"/>')
        canvas.text(px, y0 + 16, _fmt(t), size=10, anchor="middle")
    for t in _ticks(*ylim):
        _, py = to_px(xlim[0], t)
        canvas.add(f'<line x1="{x0 - 4}" y1="{_fmt(py)}" x2="{x0}" y2="{_fmt(py)}" '
                   f'stroke="black"/>')
        canvas.text(x0 - 6, py + 3, _fmt(t), size=10, anchor="end")
    canvas.text((x0 + x1) / 2, _H - 12, xlabel, anchor="middle")
    canvas.text(14, (y0 + y1) / 2, ylabel, anchor="middle", rotate=True)
    canvas.text((x0 + x1) / 2, 18, title, size=13, anchor="middle")
    return to_px


def scatter_plot(path, points, xlabel, ylabel, title, connect=True) -> None:
    """Scatter with optional connecting polyline.

    points: iterable of (x, y, label); the polyline follows input order.
    """
    points = list(points)
    if not points:
        raise ValueError("no points to plot")
    canvas = _Canvas()
    xlim = _axis_range([p[0] for p in points])
    ylim = _axis_range([p[1] for p in points])
    to_px = _plot_frame(canvas, xlim, ylim, xlabel, ylabel, title)
    if connect and len(points) > 1:
        coords = " ".join(f"{_fmt(px)},{_fmt(py)}"
                          for px, py in (to_px(p[0], p[1]) for p in points))
        canvas.add(f'<polyline points="{coords}" fill="none" stroke="steelblue"/>')
    for x, y, label in points:
        px, py = to_px(x, y)
        canvas.add(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="4" fill="crimson"/>')
        if label:
            canvas.text(px + 6, py - 6, label, size=10)
    with open(path, "w") as fh:
        fh.write(canvas.render())


def overlay_plot(path, original, deformed, grid_coords=None, title="") -> None:
    """Landmark before/after overlay with optional warp-grid lines.

    original/deformed: (n, 2) arrays in normalized [-1, 1] coordinates;
    grid_coords: (H, W, 2) backward-map grid drawn as its row/column images.
    """
    original = np.asarray(original, dtype=float)
    deformed = np.asarray(deformed, dtype=float)
    canvas = _Canvas(width=420, height=440)
    x0, y0, side = 30, 50, 360

    def to_px(p):
        return (x0 + (p[0] + 1.0) / 2.0 * side, y0 + (p[1] + 1.0) / 2.0 * side)

    canvas.text(210, 24, title or "landmark overlay", size=13, anchor="middle")
    canvas.add(f'<rect x="{x0}" y="{y0}" width="{side}" height="{side}" '
               f'fill="none" stroke="black"/>')
    if grid_coords is not None:
        grid = np.asarray(grid_coords, dtype=float)
        step = max(1, grid.shape[0] // 8)
        for r in range(0, grid.shape[0], step):
            pts = " ".join(f"{_fmt(px)},{_fmt(py)}"
                           for px, py in (to_px(p) for p in grid[r]))
            canvas.add(f'<polyline points="{pts}" fill="none" stroke="#bbbbbb" '
                       f'stroke-width="0.6"/>')
        for c in range(0, grid.shape[1], step):
            pts = " ".join(f"{_fmt(px)},{_fmt(py)}"
                           for px, py in (to_px(p) for p in grid[:, c]))
            canvas.add(f'<polyline points="{pts}" fill="none" stroke="#bbbbbb" '
                       f'stroke-width="0.6"/>')
    for p in original:
        px, py = to_px(p)
        canvas.add(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="3.5" fill="none" '
                   f'stroke="steelblue" stroke-width="1.5"/>')
    for p in deformed:
        px, py = to_px(p)
        canvas.add(f'<circle cx="{_fmt(px)}" cy="{_fmt(py)}" r="2.5" fill="crimson"/>')
    canvas.text(x0, y0 + side + 24, "open blue = original, solid red = deformed", size=11)
    with open(path, "w") as fh:
        fh.write(canvas.render())
