import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import inside_box

from obbseg.boxdet import Detection, decode_heads, determine_boxes
from obbseg.errors import InvalidArgument
from obbseg.geometry import OrientedBox, obb_to_corners
from obbseg.raster import label_components, rasterize_polygon


def angle_err_deg(a, b):
    return math.degrees(abs((a - b + math.pi / 2) % math.pi - math.pi / 2))


class TestDecode:
    def test_forced_class(self):
        z = np.zeros((8, 8, 4))
        z[..., 2] = 10.0
        (lm, cm), = decode_heads([z], 64, 64).values()
        assert lm.shape == (64, 64) and (lm == 2).all()
        assert np.all(cm > 0.99)

    def test_uniform_logits(self):
        z = np.zeros((4, 4, 4))
        out = decode_heads({4: z}, 64, 64)
        lm, cm = out[4]
        np.testing.assert_allclose(cm, 0.75, atol=1e-15)
        assert not lm.any()  # ties resolve to background

    def test_single_cell_block(self):
        z = np.zeros((8, 8, 4))
        z[..., 0] = 5.0
        z[2, 5, 1] = 20.0
        out = decode_heads([z], 64, 64)
        assert list(out) == [3]
        lm = out[3][0]
        assert (lm == 1).sum() == 64 and (lm[16:24, 40:48] == 1).all()

    def test_all_scales_channels_first(self, rng):
        heads = [rng.standard_normal((4, 64 >> s, 64 >> s)) for s in (5, 4, 3, 2, 1)]
        out = decode_heads(heads, 64, 64, channels_first=True)
        assert sorted(out) == [1, 2, 3, 4, 5]
        assert all(v[0].shape == (64, 64) for v in out.values())

    @pytest.mark.parametrize(
        "heads",
        [[np.zeros((5, 8, 4))], [np.zeros((8, 8, 1))], [np.zeros((64, 64, 4))], [np.zeros((8, 8, 4)), np.zeros((8, 8, 4))], [np.zeros((8, 8, 4)), np.zeros((4, 4, 3))]],
    )
    def test_inconsistent(self, heads):
        with pytest.raises(InvalidArgument):
            decode_heads(heads, 64, 64)


class TestDetermine:
    def test_empty(self):
        assert determine_boxes(np.zeros((16, 16), int), np.zeros((16, 16)), 1) == []

    def test_axis_rect(self):
        lm = np.zeros((40, 40), int)
        lm[10:20, 5:25] = 3
        cm = np.where(lm > 0, 0.9, 0.1)
        (d,) = determine_boxes(lm, cm, 2)
        assert d.class_id == 3 and d.scale_index == 2 and d.score == 0.9
        assert abs(d.box.w - 20) <= 1 and abs(d.box.h - 10) <= 1
        assert d.box.alpha == pytest.approx(0.0, abs=1e-12)

    def test_two_regions(self):
        lm = np.zeros((30, 30), int)
        lm[2:8, 2:8] = 1
        lm[15:25, 12:20] = 1
        assert len(determine_boxes(lm, np.ones((30, 30)), 1)) == 2

    def test_mismatched_maps(self):
        with pytest.raises(InvalidArgument):
            determine_boxes(np.zeros((4, 4), int), np.zeros((4, 5)), 1)

    def test_rotated_region(self):
        b = OrientedBox(32, 32, 30, 12, math.radians(30))
        lm = rasterize_polygon(obb_to_corners(b), 64, 64).astype(int)
        (d,) = determine_boxes(lm, lm.astype(float), 1)
        assert angle_err_deg(d.box.alpha, b.alpha) <= 3.0
        assert abs(d.box.area - b.area) <= 0.1 * b.area

    def test_mean_score(self):
        lm = np.zeros((10, 10), int)
        lm[2:6, 2:6] = 1
        cm = np.zeros((10, 10))
        cm[2:6, 2:6] = np.linspace(0.2, 0.8, 16).reshape(4, 4)
        (d,) = determine_boxes(lm, cm, 1)
        assert d.score == pytest.approx(0.5, abs=1e-12)

    def test_hole_ignored(self):
        lm = np.ones((12, 12), int)
        lm[4:8, 4:8] = 0
        lm = np.pad(lm, 2)
        (d,) = determine_boxes(lm, np.ones(lm.shape), 1, denoise=False, min_region=1)
        assert d.box.area == pytest.approx(144.0)

    def test_thin_region_nonzero_area(self):
        lm = np.zeros((10, 10), int)
        lm[5, 2:8] = 2
        (d,) = determine_boxes(lm, np.ones((10, 10)), 1, denoise=False)
        assert d.box.area == pytest.approx(6.0)

    @given(
        st.floats(6, 24),
        st.floats(3, 12),
        st.floats(-math.pi / 2, math.pi / 2),
        st.integers(0, 2),
        st.floats(0.05, 1.0),
    )
    def test_invariants(self, w, h, a, cls, conf):
        b = OrientedBox(32, 32, w, h, a)
        lm = rasterize_polygon(obb_to_corners(b), 64, 64).astype(int) * (cls + 1)
        cm = np.where(lm > 0, conf, 0.0)
        dets = determine_boxes(lm, cm, 1, kernel=1, min_region=1)
        _, n = label_components(lm > 0)
        assert len(dets) <= n
        for d in dets:
            assert 0.0 <= d.score <= 1.0 and d.score == conf
            np.testing.assert_allclose(d.corners, obb_to_corners(d.box))
        if len(dets) == 1:
            rows, cols = np.nonzero(lm)
            grown = OrientedBox(dets[0].box.cx, dets[0].box.cy, dets[0].box.w + 1e-6, dets[0].box.h + 1e-6, dets[0].box.alpha)
            assert inside_box(grown, cols + 0.5, rows + 0.5).all()

    @given(st.integers(-8, 8), st.integers(-8, 8), st.floats(-1.5, 1.5))
    def test_translation_equivariance(self, dx, dy, a):
        b = OrientedBox(32, 32, 18, 8, a)
        lm = np.zeros((80, 80), int)
        lm[8:72, 8:72] = rasterize_polygon(obb_to_corners(b), 64, 64) * 2
        cm = lm * 0.4
        moved = np.roll(np.roll(lm, dy, axis=0), dx, axis=1)
        d0 = determine_boxes(lm, cm, 1)
        d1 = determine_boxes(moved, moved * 0.4, 1)
        assert len(d0) == len(d1)
        for p, q in zip(d0, d1):
            # shape is bit-identical; the centre differs by at most one rounding
            assert (q.box.w, q.box.h, q.box.alpha) == (p.box.w, p.box.h, p.box.alpha)
            assert q.box.cx == pytest.approx(p.box.cx + dx, abs=1e-12)
            assert q.box.cy == pytest.approx(p.box.cy + dy, abs=1e-12)
            assert q.score == p.score and q.class_id == p.class_id


def test_detection_translated():
    d = Detection(OrientedBox(5, 6, 4, 2, 0.1), 1, 0.5, 3)
    t = d.translated(10, -2)
    assert tuple(t.box.center) == (15, 4) and t.score == 0.5 and t.scale_index == 3
