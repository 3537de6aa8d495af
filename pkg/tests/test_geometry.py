import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grasprefine.geometry import (
    OrientedRect, angle_distance, axis_aligned_iou, polygon_area, polygon_clip, rect_corners, rotated_iou,
)
from oracles import raster_iou, raster_iou_bruteforce

extent = st.floats(1.0, 200.0)
coord = st.floats(-100.0, 100.0)
angle = st.floats(0.0, math.pi, exclude_max=True)
rects = st.builds(OrientedRect, coord, coord, extent, extent, angle)


def _as_tuple(r):
    return (r.cx, r.cy, r.w, r.h, r.theta)


def test_corners_axis_aligned_square():
    pts = rect_corners(OrientedRect(0, 0, 2, 2, 0))
    assert {tuple(p) for p in np.round(pts, 12)} == {(-1, -1), (1, -1), (1, 1), (-1, 1)}


def test_corners_square_quarter_turn_same_set():
    a = np.round(rect_corners(OrientedRect(0, 0, 2, 2, 0)), 12) + 0.0
    b = np.round(rect_corners(OrientedRect(0, 0, 2, 2, math.pi / 2)), 12) + 0.0
    assert {tuple(p) for p in a} == {tuple(p) for p in b}


def test_corners_rotated_by_hand():
    # w-axis (cos45, sin45) * 2, h-axis (-sin45, cos45) * 1
    r = math.sqrt(0.5)
    expected = [
        (5 - 2 * r + r, 5 - 2 * r - r),
        (5 + 2 * r + r, 5 + 2 * r - r),
        (5 + 2 * r - r, 5 + 2 * r + r),
        (5 - 2 * r - r, 5 - 2 * r + r),
    ]
    np.testing.assert_allclose(rect_corners(OrientedRect(5, 5, 4, 2, math.pi / 4)), expected, atol=1e-12)


@given(rects)
def test_corner_properties(r):
    pts = rect_corners(r)
    np.testing.assert_allclose(pts.mean(axis=0), [r.cx, r.cy], atol=1e-9)
    edges = sorted(np.hypot(*(np.roll(pts, -1, axis=0) - pts).T))
    np.testing.assert_allclose(edges, sorted([r.w, r.h, r.w, r.h]), rtol=1e-9)
    assert polygon_area(pts) == pytest.approx(r.w * r.h, rel=1e-9)


def test_area_examples():
    assert polygon_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == 1.0
    assert polygon_area(np.empty((0, 2))) == 0.0
    assert polygon_area([(0, 0), (4, 0), (0, 3)]) == 6.0


def test_clip_self():
    p = rect_corners(OrientedRect(3, 4, 5, 2, 0.3))
    assert polygon_area(polygon_clip(p, p)) == pytest.approx(10.0, abs=1e-12)


def test_clip_disjoint():
    a = rect_corners(OrientedRect(0, 0, 1, 1, 0))
    b = rect_corners(OrientedRect(10, 0, 1, 1, 0.2))
    assert len(polygon_clip(a, b)) == 0


def test_clip_octagon():
    a = rect_corners(OrientedRect(0, 0, 1, 1, 0))
    b = rect_corners(OrientedRect(0, 0, 1, 1, math.pi / 4))
    octagon = polygon_clip(a, b)
    assert len(octagon) == 8
    assert polygon_area(octagon) == pytest.approx(2 * (math.sqrt(2) - 1), abs=1e-12)
    # rasterization oracle at 4000 x 4000 over the union box
    assert raster_iou(_as_tuple(OrientedRect(0, 0, 1, 1, 0)), _as_tuple(OrientedRect(0, 0, 1, 1, math.pi / 4)),
                      n=4000) == pytest.approx(1 / math.sqrt(2), abs=1e-3)


def test_clip_accepts_clockwise_input():
    a = rect_corners(OrientedRect(0, 0, 2, 2, 0))[::-1]
    b = rect_corners(OrientedRect(1, 1, 2, 2, 0))
    assert polygon_area(polygon_clip(a, b)) == pytest.approx(1.0)


def test_touching_edges_give_zero_area():
    a = rect_corners(OrientedRect(0, 0, 2, 2, 0))
    b = rect_corners(OrientedRect(2, 0, 2, 2, 0))
    assert polygon_area(polygon_clip(a, b)) == pytest.approx(0.0, abs=1e-9)


def test_iou_examples():
    a = OrientedRect(1, 2, 3, 4, 0.5)
    assert rotated_iou(a, a) == 1.0
    assert rotated_iou(a, OrientedRect(100, 2, 3, 4, 0.5)) == 0.0
    sq = OrientedRect(0, 0, 1, 1, 0)
    assert rotated_iou(sq, OrientedRect(0, 0, 1, 1, math.pi / 4)) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert (math.sqrt(2) - 1) / (2 - math.sqrt(2)) == pytest.approx(1 / math.sqrt(2))


def test_axis_aligned_iou():
    a = OrientedRect(0, 0, 2, 2, 0)
    assert axis_aligned_iou(a, OrientedRect(1, 0, 2, 2, 0)) == pytest.approx(1 / 3)
    # the rotated square's hull is sqrt(2) wide, fully containing a
    assert axis_aligned_iou(a, OrientedRect(0, 0, 2, 2, math.pi / 4)) == pytest.approx(4 / 8)


def test_angle_distance_examples():
    assert angle_distance(0.3, 0.3) == 0.0
    assert angle_distance(0.05, math.pi - 0.05) == pytest.approx(0.10, abs=1e-12)
    assert angle_distance(0.0, math.pi / 2) == pytest.approx(math.pi / 2)


@settings(max_examples=300)
@given(rects, rects)
def test_iou_symmetric_and_bounded(a, b):
    v = rotated_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(rotated_iou(b, a), abs=1e-12)


@given(rects)
def test_iou_identity(a):
    assert rotated_iou(a, a) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=200)
@given(rects, rects, st.floats(-10, 10), st.floats(-500, 500), st.floats(-500, 500))
def test_iou_rigid_invariance(a, b, delta, tx, ty):
    c, s = math.cos(delta), math.sin(delta)

    def move(r):
        return OrientedRect(c * r.cx - s * r.cy + tx, s * r.cx + c * r.cy + ty, r.w, r.h, r.theta + delta)

    assert rotated_iou(move(a), move(b)) == pytest.approx(rotated_iou(a, b), abs=1e-9)


@given(angle, angle, angle)
def test_angle_distance_pseudometric(a, b, c):
    assert angle_distance(a, a) == 0.0
    assert angle_distance(a, b) == pytest.approx(angle_distance(b, a), abs=1e-15)
    assert 0.0 <= angle_distance(a, b) <= math.pi / 2 + 1e-15
    assert angle_distance(a, c) <= angle_distance(a, b) + angle_distance(b, c) + 1e-12


def test_raster_oracles_agree():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = (*rng.uniform(0, 50, 2), *rng.uniform(1, 40, 2), rng.uniform(0, math.pi))
        b = (*rng.uniform(0, 50, 2), *rng.uniform(1, 40, 2), rng.uniform(0, math.pi))
        if raster_iou_bruteforce(a, b, 300) == 0.0:
            continue
        assert raster_iou(a, b, 300) == pytest.approx(raster_iou_bruteforce(a, b, 300), abs=1e-12)


def test_iou_matches_raster_sample():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a = OrientedRect(*rng.uniform(0, 100, 2), *rng.uniform(1, 200, 2), rng.uniform(0, math.pi))
        b = OrientedRect(a.cx + rng.uniform(-50, 50), a.cy + rng.uniform(-50, 50),
                         *rng.uniform(1, 200, 2), rng.uniform(0, math.pi))
        assert abs(rotated_iou(a, b) - raster_iou(_as_tuple(a), _as_tuple(b))) <= 1e-3


def test_invalid_rect():
    with pytest.raises(ValueError):
        OrientedRect(0, 0, 0, 1, 0)
    with pytest.raises(ValueError):
        OrientedRect(0, float("nan"), 1, 1, 0)
    assert OrientedRect(0, 0, 1, 1, -0.25).theta == pytest.approx(math.pi - 0.25)
