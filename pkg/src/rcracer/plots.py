"""SVG rendering of closed-loop runs.

The files are written directly as SVG markup; no plotting backend is
needed. The main view shows the track borders and the driven trajectory
colored by speed, with obstacles and the planner corridor overlaid when
present.
"""

from __future__ import annotations

import os

import numpy as np

from .track import TrackGeometry

# blue (slow) over green to red (fast)
_STOPS = np.array([
    [0.00, 0.19, 0.51],
    [0.13, 0.57, 0.55],
    [0.45, 0.77, 0.31],
    [0.93, 0.68, 0.10],
    [0.84, 0.16, 0.14],
])


def speed_color(v: float, v_min: float, v_max: float) -> str:
    """Hex color for a speed on the scale [v_min, v_max]."""
    if v_max <= v_min:
        frac = 0.0
    else:
        frac = float(np.clip((v - v_min) / (v_max - v_min), 0.0, 1.0))
    pos = frac * (len(_STOPS) - 1)
    i = min(int(pos), len(_STOPS) - 2)
    w = pos - i
    rgb = (1.0 - w) * _STOPS[i] + w * _STOPS[i + 1]
    r, g, b = (int(round(255 * c)) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


def _records_to_arrays(telemetry):
    xs, ys, speeds = [], [], []
    for r in telemetry:
        if isinstance(r, dict):
            x, y = r["X"], r["Y"]
            v = float(np.hypot(r["vx"], r["vy"]))
        else:
            x, y = r.state[0], r.state[1]
            v = float(np.hypot(r.state[3], r.state[4]))
        xs.append(float(x))
        ys.append(float(y))
        speeds.append(v)
    return np.array(xs), np.array(ys), np.array(speeds)


def _border_points(track: TrackGeometry, side: float, n: int = 600):
    sp = track.spline
    ths = np.linspace(0.0, track.length, n, endpoint=False)
    c = sp.position(ths)
    d = sp.derivative(ths)
    t = d / np.linalg.norm(d, axis=1, keepdims=True)
    nrm = np.stack([-t[:, 1], t[:, 0]], axis=1)
    hw = track.half_width_at(ths)
    return c + side * hw[:, None] * nrm


class _Svg:
    """Minimal SVG writer with a world-to-viewport transform."""

    def __init__(self, x_range, y_range, width=900, pad=40):
        wx = x_range[1] - x_range[0]
        wy = y_range[1] - y_range[0]
        self.scale = (width - 2 * pad) / wx
        self.width = width
        self.height = int(wy * self.scale + 2 * pad)
        self.pad = pad
        self.x0, self.y1 = x_range[0], y_range[1]
        self.parts = []

    def pt(self, x, y):
        return (self.pad + (x - self.x0) * self.scale,
                self.pad + (self.y1 - y) * self.scale)

    def polyline(self, pts, stroke, width=1.5, closed=False, fill="none",
                 opacity=1.0):
        coords = " ".join(f"{px:.2f},{py:.2f}" for px, py in
                          (self.pt(x, y) for x, y in pts))
        tag = "polygon" if closed else "polyline"
        self.parts.append(
            f'<{tag} points="{coords}" fill="{fill}" stroke="{stroke}" '
            f'stroke-width="{width}" opacity="{opacity}" />')

    def segment(self, p0, p1, stroke, width=2.5):
        a, b = self.pt(*p0), self.pt(*p1)
        self.parts.append(
            f'<line x1="{a[0]:.2f}" y1="{a[1]:.2f}" x2="{b[0]:.2f}" '
            f'y2="{b[1]:.2f}" stroke="{stroke}" stroke-width="{width}" '
            f'stroke-linecap="round" />')

    def circle(self, x, y, r_world, fill, opacity=1.0):
        cx, cy = self.pt(x, y)
        self.parts.append(
            f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r_world * self.scale:.2f}" '
            f'fill="{fill}" opacity="{opacity}" />')

    def text(self, px, py, s, size=13):
        self.parts.append(
            f'<text x="{px:.1f}" y="{py:.1f}" font-family="sans-serif" '
            f'font-size="{size}">{s}</text>')

    def raw(self, s):
        self.parts.append(s)

    def tostring(self):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" '
                f'width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="white" />',
                          *self.parts, "</svg>"])


def _legend(svg: _Svg, v_min, v_max):
    x, y, w, h = svg.width - 160, 20, 120, 12
    n = 24
    for i in range(n):
        v = v_min + (v_max - v_min) * i / (n - 1)
        svg.raw(f'<rect x="{x + i * w / n:.1f}" y="{y}" width="{w / n + 0.5:.1f}" '
                f'height="{h}" fill="{speed_color(v, v_min, v_max)}" />')
    svg.text(x, y + h + 14, f"{v_min:.2f} m/s")
    svg.text(x + w - 40, y + h + 14, f"{v_max:.2f} m/s")


def _corridor_band(svg, track, corridor, color="#bbbbbb"):
    theta, centers, widths = corridor
    sp = track.spline
    order = np.argsort(theta)
    th = np.asarray(theta, float)[order]
    cc = np.asarray(centers, float)[order]
    ww = np.asarray(widths, float)[order]
    c = sp.position(th)
    d = sp.derivative(th)
    t = d / np.linalg.norm(d, axis=1, keepdims=True)
    n = np.stack([-t[:, 1], t[:, 0]], axis=1)
    upper = c + (cc + ww)[:, None] * n
    lower = c + (cc - ww)[:, None] * n
    pts = np.vstack([upper, lower[::-1]])
    svg.polyline(pts, stroke="none", fill=color, closed=True, opacity=0.45)


def emit_plots(telemetry, track: TrackGeometry, out_dir,
               obstacles=(), corridor_steps=()):
    """Write the run overview SVG; returns the list of written files.

    `corridor_steps` selects telemetry indices whose stored corridor and
    predicted horizon (when recorded via keep_predictions) are overlaid.
    """
    if not len(telemetry):
        raise ValueError("telemetry is empty")
    xs, ys, speeds = _records_to_arrays(telemetry)
    outer = _border_points(track, +1.0)
    inner = _border_points(track, -1.0)
    allx = np.concatenate([outer[:, 0], inner[:, 0]])
    ally = np.concatenate([outer[:, 1], inner[:, 1]])
    svg = _Svg((allx.min() - 0.1, allx.max() + 0.1),
               (ally.min() - 0.1, ally.max() + 0.1))

    svg.polyline(track.points, stroke="#dddddd", width=1.0, closed=track.closed)
    svg.polyline(outer, stroke="black", width=2.0, closed=True)
    svg.polyline(inner, stroke="black", width=2.0, closed=True)

    for idx in corridor_steps:
        rec = telemetry[idx]
        corr = getattr(rec, "corridor", None)
        if corr is not None:
            _corridor_band(svg, track, corr)
        pred = getattr(rec, "predicted", None)
        if pred is not None:
            svg.polyline(pred, stroke="#555555", width=1.2)

    for ob in obstacles:
        svg.circle(ob.x, ob.y, ob.radius, fill="#9467bd", opacity=0.8)

    v_min, v_max = float(speeds.min()), float(speeds.max())
    for i in range(len(xs) - 1):
        col = speed_color(0.5 * (speeds[i] + speeds[i + 1]), v_min, v_max)
        svg.segment((xs[i], ys[i]), (xs[i + 1], ys[i + 1]), stroke=col)
    _legend(svg, v_min, v_max)

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "trajectory.svg")
    with open(path, "w") as fh:
        fh.write(svg.tostring())
    return [path]


__all__ = ["speed_color", "emit_plots"]
