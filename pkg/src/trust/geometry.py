"""2-D geometry helpers: convex quads, line clipping, homographies.

Conventions used throughout the package (image coordinates, y down):
  - column separator angle is measured from vertical, in degrees; a line
    through (x0, y0) at angle a satisfies x(y) = x0 + (y - y0) * tan(a).
  - row separator angle is measured from horizontal; a line through
    (x0, y0) at angle a satisfies y(x) = y0 - (x - x0) * tan(a).
  - rotating geometry by r degrees adds r to both angle kinds.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np


def quad_area(quad: np.ndarray) -> float:
    x, y = quad[:, 0], quad[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def is_convex(quad: np.ndarray, tol: float = 1e-9) -> bool:
    signs = []
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if abs(cross) > tol:
            signs.append(cross > 0)
    return len(set(signs)) <= 1


def _clip_line_to_convex(p0: np.ndarray, d: np.ndarray, quad: np.ndarray) -> Optional[tuple]:
    """Interval of t for which p0 + t*d lies inside a convex quad."""
    orient = 1.0 if quad_area(quad) > 0 else -1.0
    lo, hi = -math.inf, math.inf
    for i in range(4):
        a = quad[i]
        b = quad[(i + 1) % 4]
        ex, ey = b[0] - a[0], b[1] - a[1]
        # inside condition: orient * cross(e, p - a) >= 0, linear in t
        alpha = orient * (ex * d[1] - ey * d[0])
        beta = orient * (ex * (p0[1] - a[1]) - ey * (p0[0] - a[0]))
        if abs(alpha) < 1e-12:
            if beta < -1e-9:
                return None
            continue
        t = -beta / alpha
        if alpha > 0:
            lo = max(lo, t)
        else:
            hi = min(hi, t)
    if lo > hi:
        return None
    return (lo, hi)


def vline_quad_interval(x: float, quad: np.ndarray) -> Optional[tuple]:
    """y-interval where the vertical line x=const crosses a convex quad."""
    return _clip_line_to_convex(np.array([x, 0.0]), np.array([0.0, 1.0]), quad)


def hline_quad_interval(y: float, quad: np.ndarray) -> Optional[tuple]:
    """x-interval where the horizontal line y=const crosses a convex quad."""
    return _clip_line_to_convex(np.array([0.0, y]), np.array([1.0, 0.0]), quad)


def line_intersect(p: np.ndarray, d: np.ndarray, q: np.ndarray, e: np.ndarray) -> Optional[np.ndarray]:
    """Intersection of lines p + t*d and q + s*e, or None if parallel."""
    det = d[0] * (-e[1]) - d[1] * (-e[0])
    if abs(det) < 1e-12:
        return None
    rx, ry = q[0] - p[0], q[1] - p[1]
    t = (rx * (-e[1]) - ry * (-e[0])) / det
    return np.array([p[0] + t * d[0], p[1] + t * d[1]])


def y_on_line_at_x(a: np.ndarray, b: np.ndarray, x: float) -> float:
    """y of the infinite line through a, b at the given x (not near-vertical)."""
    if abs(b[0] - a[0]) < 1e-9:
        return float(a[1])
    t = (x - a[0]) / (b[0] - a[0])
    return float(a[1] + t * (b[1] - a[1]))


def x_on_line_at_y(a: np.ndarray, b: np.ndarray, y: float) -> float:
    if abs(b[1] - a[1]) < 1e-9:
        return float(a[0])
    t = (y - a[1]) / (b[1] - a[1])
    return float(a[0] + t * (b[0] - a[0]))


def col_line_direction(angle_deg: float) -> np.ndarray:
    r = math.radians(angle_deg)
    return np.array([math.sin(r), math.cos(r)])


def row_line_direction(angle_deg: float) -> np.ndarray:
    r = math.radians(angle_deg)
    return np.array([math.cos(r), -math.sin(r)])


def col_angle_of_direction(d: np.ndarray) -> float:
    dx, dy = (d[0], d[1]) if d[1] >= 0 else (-d[0], -d[1])
    return math.degrees(math.atan2(dx, dy))


def row_angle_of_direction(d: np.ndarray) -> float:
    dx, dy = (d[0], d[1]) if d[0] >= 0 else (-d[0], -d[1])
    return math.degrees(math.atan2(-dy, dx))


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


# -- homographies ---------------------------------------------------------------


def rotation_homography(angle_deg: float, center) -> np.ndarray:
    """Rotation that adds angle_deg to both separator angle conventions."""
    r = math.radians(angle_deg)
    c, s = math.cos(r), math.sin(r)
    cx, cy = center
    t1 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]], dtype=np.float64)
    t2 = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    return t2 @ rot @ t1


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform from 4 source to 4 destination points."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ h.T
    out = proj[:, :2] / proj[:, 2:3]
    return out if np.asarray(points).ndim > 1 else out[0]
