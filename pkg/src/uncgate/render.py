"""Static SVG scene renders.

One picture per scene: true map polylines, the mapper's vertex means
with 1-sigma covariance ellipses, the ego history, the ground-truth
future and each stream's candidates.  Output is plain text, so renders
are byte-stable for identical inputs.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .scenegen import Scene

STREAM_COLOURS = {"base": "#1f77b4", "unc": "#d62728", "gated": "#2ca02c"}


def ellipse_geometry(cov, n_sigma: float = 1.0) -> tuple[float, float, float]:
    """Semi-axes and rotation of the ``n_sigma`` contour of a 2x2 covariance.

    Returns ``(major, minor, angle)`` with ``angle`` in degrees from +x to
    the major axis, in world coordinates (y up).
    """
    w, v = np.linalg.eigh(np.asarray(cov, float))
    w = np.clip(w, 0.0, None)
    major, minor = n_sigma * math.sqrt(w[1]), n_sigma * math.sqrt(w[0])
    angle = math.degrees(math.atan2(v[1, 1], v[0, 1]))
    return major, minor, angle


class _Canvas:
    def __init__(self, points: np.ndarray, size: int = 640, margin: float = 3.0):
        lo, hi = points.min(axis=0) - margin, points.max(axis=0) + margin
        span = float(max(hi - lo))
        self.lo, self.hi = lo, lo + span
        self.scale = size / span
        self.size = size
        self.items: list[str] = []

    def xy(self, p) -> tuple[float, float]:
        # SVG y grows downward; flip so the picture has y up.
        return (float(p[0] - self.lo[0]) * self.scale, float(self.hi[1] - p[1]) * self.scale)

    def polyline(self, pts, colour, width=1.5, dash=None, opacity=1.0):
        coords = " ".join("%.2f,%.2f" % self.xy(p) for p in pts)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" '
                          f'stroke-width="{width}" stroke-opacity="{opacity}"{extra}/>')

    def ellipse(self, centre, cov, colour):
        major, minor, angle = ellipse_geometry(cov)
        cx, cy = self.xy(centre)
        # the y flip turns a counter-clockwise world angle into a clockwise screen angle
        self.items.append(f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{major * self.scale:.2f}" '
                          f'ry="{minor * self.scale:.2f}" transform="rotate({-angle:.3f} {cx:.2f} {cy:.2f})" '
                          f'fill="{colour}" fill-opacity="0.15" stroke="{colour}" stroke-width="0.6"/>')

    def dot(self, p, colour, r=2.0):
        cx, cy = self.xy(p)
        self.items.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r}" fill="{colour}"/>')

    def text(self, x, y, s):
        self.items.append(f'<text x="{x}" y="{y}" font-family="monospace" font-size="11">{s}</text>')

    def svg(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" height="{self.size}" '
                f'viewBox="0 0 {self.size} {self.size}">')
        bg = f'<rect width="{self.size}" height="{self.size}" fill="white"/>'
        return "\n".join([head, bg, *self.items, "</svg>"]) + "\n"


def scene_svg(scene: Scene, map_mu=None, map_cov=None,
              candidates: Mapping[str, np.ndarray] | None = None, title: str = "") -> str:
    """Render one scene in world coordinates.

    ``map_mu`` ``(V, 2)`` and ``map_cov`` ``(V, 2, 2)`` are the mapper's
    per-vertex output in element order; ``candidates`` maps a stream tag to
    ``(K, T, 2)`` world-frame futures.
    """
    candidates = dict(candidates or {})
    obs, true, _, _ = scene.vertices()
    pts = [true, scene.history, scene.future_gt] + [c.reshape(-1, 2) for c in candidates.values()]
    if map_mu is not None:
        pts.append(np.asarray(map_mu))
    cv = _Canvas(np.concatenate(pts))

    for e in scene.elements:
        cv.polyline(e.true_pts, "#888888", width=1.0, dash="4 3" if e.cls == "divider" else None)
    if map_mu is not None:
        mu = np.asarray(map_mu, float)
        start = 0
        for e in scene.elements:
            n = len(e.true_pts)
            cv.polyline(mu[start:start + n], "#9467bd", width=0.8, opacity=0.8)
            start += n
        for m, c in zip(mu, np.asarray(map_cov, float)):
            cv.ellipse(m, c, "#9467bd")
    else:
        for p in obs:
            cv.dot(p, "#9467bd", r=1.2)

    cv.polyline(scene.history, "black", width=2.0)
    cv.polyline(np.vstack([scene.history[-1:], scene.future_gt]), "black", width=2.0, dash="6 3")
    for tag, cands in candidates.items():
        colour = STREAM_COLOURS.get(tag, "#ff7f0e")
        for c in cands:
            cv.polyline(np.vstack([scene.history[-1:], c]), colour, width=1.2, opacity=0.7)
    cv.dot(scene.history[-1], "black", r=3.0)

    cv.text(8, 16, f"{scene.id}  dtheta={scene.delta_theta_gt:.3f} rad {title}".strip())
    for i, tag in enumerate(candidates):
        cv.text(8, 32 + 14 * i, f"-- {tag}")
    return cv.svg()
