"""Planar geometry for oriented rectangles.

Coordinates follow the raster convention: x to the right, y downward, and
``theta`` is measured from +x toward +y.  ``theta`` is the direction of the
rectangle's ``w`` axis (the gripper opening direction).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-9


def normalize_angle(theta: float) -> float:
    """Map any finite angle into ``[0, pi)``."""
    t = math.fmod(float(theta), math.pi)
    if t < 0.0:
        t += math.pi
    # fmod of values like -1e-17 gives pi after the shift
    if t >= math.pi:
        t = 0.0
    return t


@dataclass(frozen=True)
class OrientedRect:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"extents must be positive, got w={self.w} h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def area(self) -> float:
        return self.w * self.h


def rect_corners(r: OrientedRect) -> np.ndarray:
    """Return the 4x2 corner array of ``r`` with positive signed area."""
    c, s = math.cos(r.theta), math.sin(r.theta)
    u = np.array([c, s]) * (r.w / 2.0)
    v = np.array([-s, c]) * (r.h / 2.0)
    center = np.array([r.cx, r.cy])
    return np.array([center - u - v, center + u - v, center + u + v, center - u + v])


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _as_ccw(poly) -> np.ndarray:
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(poly) >= 3 and _signed_area(poly) < 0:
        poly = poly[::-1]
    return poly


def _dedupe(points: list) -> np.ndarray:
    out = []
    for p in points:
        if not out or abs(p[0] - out[-1][0]) > EPS or abs(p[1] - out[-1][1]) > EPS:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= EPS and abs(out[0][1] - out[-1][1]) <= EPS:
        out.pop()
    return np.array(out, dtype=float).reshape(-1, 2)


def polygon_clip(subject, clip) -> np.ndarray:
    """Intersect two convex polygons (Sutherland-Hodgman).

    Returns an ``(k, 2)`` array; ``k == 0`` for an empty intersection.
    Either input may be given in either winding order.
    """
    subject = _as_ccw(subject)
    clip = _as_ccw(clip)
    if len(subject) < 3 or len(clip) < 3:
        return np.empty((0, 2))

    output = [tuple(p) for p in subject]
    for i in range(len(clip)):
        if not output:
            break
        ax, ay = clip[i - 1]
        bx, by = clip[i]
        ex, ey = bx - ax, by - ay
        scale = math.hypot(ex, ey)
        if scale <= EPS:
            continue

        def side(p):
            # signed distance to the clip edge, positive on the inner side
            return (ex * (p[1] - ay) - ey * (p[0] - ax)) / scale

        inputs, output = output, []
        prev = inputs[-1]
        d_prev = side(prev)
        for cur in inputs:
            d_cur = side(cur)
            if d_cur >= -EPS:
                if d_prev < -EPS:
                    t = d_prev / (d_prev - d_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif d_prev >= -EPS:
                t = d_prev / (d_prev - d_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, d_prev = cur, d_cur

    poly = _dedupe(output)
    if len(poly) < 3 or _signed_area(poly) <= 0.0:
        return np.empty((0, 2))
    return poly


def polygon_area(poly) -> float:
    """Shoelace area; empty or degenerate polygons have area 0."""
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(poly) < 3:
        return 0.0
    return abs(_signed_area(poly))


def _key(r: OrientedRect) -> tuple:
    return (r.cx, r.cy, r.w, r.h, r.theta)


def rotated_iou(a: OrientedRect, b: OrientedRect) -> float:
    # the clip tolerance makes clip(a, b) and clip(b, a) differ at the 1e-10
    # level; a fixed argument order keeps the result exactly symmetric
    if _key(b) < _key(a):
        a, b = b, a
    inter = polygon_area(polygon_clip(rect_corners(a), rect_corners(b)))
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _aabb(r: OrientedRect) -> tuple[float, float, float, float]:
    pts = rect_corners(r)
    return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


def axis_aligned_iou(a: OrientedRect, b: OrientedRect) -> float:
    """IoU of the axis-aligned hulls of two oriented rectangles."""
    ax0, ay0, ax1, ay1 = _aabb(a)
    bx0, by0, bx1, by1 = _aabb(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def angle_distance(theta_a: float, theta_b: float) -> float:
    """Distance between two grasp orientations, which are pi-periodic."""
    m = math.fmod(abs(float(theta_a) - float(theta_b)), math.pi)
    return min(m, math.pi - m)
