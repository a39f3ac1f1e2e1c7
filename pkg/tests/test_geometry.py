import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import monte_carlo_iou, sweep_min_rect_area

from obbseg.errors import DegenerateGeometry
from obbseg.geometry import (
    OrientedBox,
    convex_clip,
    convex_hull,
    corners_to_obb,
    iou_matrix,
    min_area_rect,
    obb_to_corners,
    polygon_area,
    rotate_box,
    rotated_iou,
    signed_area,
)

coord = st.floats(-50, 50, allow_nan=False)
side = st.floats(0.5, 30, allow_nan=False)
angle = st.floats(-4, 4, allow_nan=False)
boxes = st.builds(OrientedBox, coord, coord, side, side, angle)


class TestOrientedBox:
    def test_canonical_swaps_sides(self):
        b = OrientedBox(0, 0, 2, 4, 0.0)
        assert (b.w, b.h) == (4, 2)
        assert b.alpha == pytest.approx(-math.pi / 2)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            OrientedBox(0, 0, 0, 1)
        with pytest.raises(ValueError):
            OrientedBox(0, 0, 1, float("nan"))

    @given(boxes)
    def test_canonical_range(self, b):
        assert b.w >= b.h
        assert -math.pi / 2 <= b.alpha < math.pi / 2

    @given(boxes)
    def test_corners_round_trip(self, b):
        r = corners_to_obb(obb_to_corners(b))
        assert rotated_iou(b, r) == pytest.approx(1.0, abs=1e-6)
        assert r.area == pytest.approx(b.area, rel=1e-9)

    def test_corner_order_ccw(self):
        c = obb_to_corners(OrientedBox(0, 0, 4, 2, 0.3))
        assert signed_area(c) > 0


class TestHull:
    def test_square_with_interior(self):
        pts = [(0, 0), (2, 0), (2, 2), (0, 2), (1, 1), (1, 0)]
        h = convex_hull(pts)
        assert len(h) == 4
        assert polygon_area(h) == pytest.approx(4.0)

    def test_collinear_raises(self):
        with pytest.raises(DegenerateGeometry):
            convex_hull([(0, 0), (1, 1), (2, 2)])

    def test_too_few_raises(self):
        with pytest.raises(DegenerateGeometry):
            convex_hull([(0, 0), (1, 0)])

    @given(st.lists(st.tuples(coord, coord), min_size=3, max_size=40))
    def test_hull_contains_points(self, pts):
        p = np.array(pts)
        try:
            h = convex_hull(p)
        except DegenerateGeometry:
            return
        assert signed_area(h) > 0
        nxt = np.roll(h, -1, axis=0)
        for a, b in zip(h, nxt):
            cross = (b[0] - a[0]) * (p[:, 1] - a[1]) - (b[1] - a[1]) * (p[:, 0] - a[0])
            scale = max(1.0, float(np.abs(p).max()))
            assert np.all(cross >= -1e-9 * scale * scale)


class TestMinAreaRect:
    def test_axis_rect(self):
        b = min_area_rect([(0, 0), (4, 0), (4, 2), (0, 2)])
        assert b.as_tuple() == pytest.approx((2, 1, 4, 2, 0))

    def test_diamond(self):
        b = min_area_rect([(1, 0), (2, 1), (1, 2), (0, 1)])
        assert b.w == pytest.approx(math.sqrt(2))
        assert b.h == pytest.approx(math.sqrt(2))
        assert b.area == pytest.approx(2.0)

    def test_rotated_30(self):
        src = OrientedBox(10, 5, 8, 3, math.radians(30))
        b = min_area_rect(obb_to_corners(src))
        assert b.as_tuple() == pytest.approx(src.as_tuple(), abs=1e-9)

    @given(st.lists(st.tuples(coord, coord), min_size=3, max_size=30))
    def test_contains_all_points(self, pts):
        p = np.array(pts)
        try:
            b = min_area_rect(p)
        except DegenerateGeometry:
            return
        c, s = math.cos(b.alpha), math.sin(b.alpha)
        d = p - b.center
        u = d @ np.array([c, s])
        v = d @ np.array([-s, c])
        tol = 1e-7 * max(1.0, float(np.abs(p).max()))
        assert np.all(np.abs(u) <= b.w / 2 + tol)
        assert np.all(np.abs(v) <= b.h / 2 + tol)

    def test_matches_sweep(self, rng):
        for _ in range(30):
            p = rng.normal(size=(rng.integers(3, 30), 2)) * rng.uniform(1, 10, 2)
            assert min_area_rect(p).area == pytest.approx(sweep_min_rect_area(p), rel=1e-3)


class TestClipAndIou:
    def test_clip_disjoint_empty(self):
        a = obb_to_corners(OrientedBox(0, 0, 2, 2))
        b = obb_to_corners(OrientedBox(10, 0, 2, 2))
        assert convex_clip(a, b).shape == (0, 2)

    def test_touching_edges_zero(self):
        assert rotated_iou(OrientedBox(0, 0, 2, 2), OrientedBox(2, 0, 2, 2)) == 0.0

    def test_half_overlap(self):
        a = OrientedBox(0, 0, 2, 2)
        b = OrientedBox(1, 0, 2, 2)
        assert rotated_iou(a, b) == pytest.approx(1 / 3)

    def test_cross(self):
        a = OrientedBox(0, 0, 4, 2, 0)
        b = OrientedBox(0, 0, 4, 2, math.pi / 2)
        assert rotated_iou(a, b) == pytest.approx(4 / 12)

    def test_rotated_45_square(self):
        a = OrientedBox(0, 0, 2, 2, 0)
        b = OrientedBox(0, 0, 2, 2, math.pi / 4)
        inter = 8 * (math.sqrt(2) - 1)
        assert rotated_iou(a, b) == pytest.approx(inter / (8 - inter))

    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        ab, ba = rotated_iou(a, b), rotated_iou(b, a)
        assert 0.0 <= ab <= 1.0
        assert ab == pytest.approx(ba, abs=1e-9)

    @given(boxes)
    def test_self_iou_one(self, a):
        assert rotated_iou(a, a) == pytest.approx(1.0, abs=1e-9)

    @given(boxes, st.floats(-3, 3), st.floats(-20, 20), st.floats(-20, 20))
    def test_rigid_invariance(self, a, ang, dx, dy):
        b = OrientedBox(a.cx + 3, a.cy - 1, a.w * 0.8 + 0.2, a.h, a.alpha + 0.4)
        base = rotated_iou(a, b)
        a2 = rotate_box(a, ang, (0.0, 0.0)).translated(dx, dy)
        b2 = rotate_box(b, ang, (0.0, 0.0)).translated(dx, dy)
        assert rotated_iou(a2, b2) == pytest.approx(base, abs=1e-7)

    def test_monte_carlo_spot_check(self, rng):
        for _ in range(5):
            a = OrientedBox(0, 0, rng.uniform(2, 10), rng.uniform(2, 10), rng.uniform(-3, 3))
            b = OrientedBox(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(2, 10), rng.uniform(2, 10), rng.uniform(-3, 3))
            assert rotated_iou(a, b) == pytest.approx(monte_carlo_iou(a, b, 200_000, rng), abs=1e-2)

    def test_iou_matrix_matches_scalar(self, backend, rng):
        bs = [OrientedBox(*rng.uniform(0, 20, 2), *rng.uniform(1, 8, 2), rng.uniform(-3, 3)) for _ in range(25)]
        m = iou_matrix(bs[:10], bs)
        expect = np.array([[rotated_iou(a, b) for b in bs] for a in bs[:10]])
        np.testing.assert_allclose(m, expect, atol=1e-9)

    def test_iou_matrix_empty(self):
        assert iou_matrix([], [OrientedBox(0, 0, 1, 1)]).shape == (0, 1)


class TestRotateBox:
    def test_quarter_turn(self):
        b = rotate_box(OrientedBox(0, 0, 4, 2, 0), math.pi / 2)
        assert b.as_tuple() == pytest.approx((0, 0, 4, 2, -math.pi / 2))

    def test_about_point(self):
        b = rotate_box(OrientedBox(2, 0, 2, 1, 0), math.pi, (0, 0))
        assert (b.cx, b.cy) == pytest.approx((-2, 0))
