"""Static SVG rendering of grids and solutions (no plotting dependency)."""

from __future__ import annotations

import numpy as np

CLASS_COLOR = {"regular": "#1f77b4", "dangling-x": "#d62728",
               "dangling-y": "#ff7f0e", "boundary": "#2ca02c",
               "inactive": "#7f7f7f"}

WIDTH = 720


def _mapper(box):
    scale = WIDTH / max(box.lx, box.ly)
    height = box.ly * scale

    def to_px(x, y):
        return ((x - box.x_min) * scale, height - (y - box.y_min) * scale)

    return to_px, height, scale


def grid_svg(grid) -> str:
    """One rectangle per leaf cell and one class-tagged marker per node."""
    to_px, height, scale = _mapper(grid.box)
    out = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
           'viewBox="0 0 %d %d">' % (WIDTH, int(height) + 1, WIDTH,
                                     int(height) + 1)]
    for (i, j, k) in grid.cells_sorted():
        s = 1 << k
        x0, y0 = grid.position(i, j + s)
        px, py = to_px(x0, y0)
        out.append('<rect class="cell" x="%.2f" y="%.2f" width="%.2f" '
                   'height="%.2f" fill="none" stroke="#999" '
                   'stroke-width="0.5"/>'
                   % (px, py, s * grid.hx * scale, s * grid.hy * scale))
    radius = max(0.8, 0.22 * min(grid.hx, grid.hy) * scale)
    for n in grid.nodes:
        px, py = to_px(n.x, n.y)
        out.append('<circle class="node %s" cx="%.2f" cy="%.2f" r="%.2f" '
                   'fill="%s"/>' % (n.klass, px, py, radius,
                                    CLASS_COLOR[n.klass]))
    out.append("</svg>")
    return "\n".join(out)


def _color(t):
    # blue (low) to red (high) through white
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        f = t / 0.5
        r, g, b = int(40 + 215 * f), int(80 + 175 * f), 255
    else:
        f = (t - 0.5) / 0.5
        r, g, b = 255, int(255 - 175 * f), int(255 - 215 * f)
    return "#%02x%02x%02x" % (r, g, b)


def solution_svg(grid, u, contours=None) -> str:
    """Leaf cells filled by value with optional contour polylines on top."""
    values = u.values if hasattr(u, "values") else np.asarray(u)
    to_px, height, scale = _mapper(grid.box)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    out = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
           'viewBox="0 0 %d %d">' % (WIDTH, int(height) + 1, WIDTH,
                                     int(height) + 1)]
    nid = grid.node_id
    for (i, j, k) in grid.cells_sorted():
        s = 1 << k
        corners = [nid[(i, j)], nid[(i + s, j)], nid[(i, j + s)],
                   nid[(i + s, j + s)]]
        mean = float(np.mean(values[corners]))
        px, py = to_px(*grid.position(i, j + s))
        out.append('<rect class="cell" x="%.2f" y="%.2f" width="%.2f" '
                   'height="%.2f" fill="%s" stroke="none"/>'
                   % (px, py, s * grid.hx * scale, s * grid.hy * scale,
                      _color((mean - lo) / span)))
    polys = contours or []
    if isinstance(polys, dict):
        polys = [p for group in polys.values() for p in group]
    for poly in polys:
        pts = " ".join("%.2f,%.2f" % to_px(x, y) for (x, y) in poly)
        out.append('<polyline class="contour" points="%s" fill="none" '
                   'stroke="black" stroke-width="1.2"/>' % pts)
    out.append("</svg>")
    return "\n".join(out)
