import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siamtrack.core import (BBox, InvalidBox, MotionDelta, as_embedding, check_visibility,
                            decode_motion, encode_motion, iou, iou_matrix, search_region)

coord = st.floats(-1e3, 1e3, allow_nan=False)
size = st.floats(1.0, 1e3, allow_nan=False)
boxes = st.builds(BBox, coord, coord, size, size)


def test_bbox_validation():
    with pytest.raises(InvalidBox):
        BBox(0, 0, 0, 5)
    with pytest.raises(InvalidBox):
        BBox(0, 0, 5, -1)
    with pytest.raises(InvalidBox):
        BBox(float("nan"), 0, 5, 5)
    with pytest.raises(InvalidBox):
        BBox(0, float("inf"), 5, 5)
    b = BBox(np.float64(1), 2, 3, 4)
    assert type(b.x) is float and b.center == (2.5, 4.0) and b.area == 12


@pytest.mark.parametrize("a,b,expected", [
    ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
    ((0, 0, 10, 10), (20, 20, 5, 5), 0.0),
    ((0, 0, 10, 10), (5, 0, 10, 10), 1 / 3),
    ((0, 0, 10, 10), (10, 0, 10, 10), 0.0),  # touching edges
])
def test_iou_examples(a, b, expected):
    assert iou(BBox(*a), BBox(*b)) == pytest.approx(expected, abs=1e-15)


@given(boxes, boxes)
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def test_iou_random_pairs_and_matrix():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 100, size=(10_000, 2))
    wh = rng.uniform(1, 50, size=(10_000, 2))
    a = np.hstack([xy, wh])
    b = np.hstack([xy[::-1], wh[::-1]])
    vals = np.array([iou(BBox(*p), BBox(*q)) for p, q in zip(a, b)])
    assert np.all((vals >= 0) & (vals <= 1))
    back = np.array([iou(BBox(*q), BBox(*p)) for p, q in zip(a, b)])
    assert np.array_equal(vals, back)
    m = iou_matrix(a[:40], b[:30])
    for i in range(40):
        for j in range(30):
            assert m[i, j] == pytest.approx(iou(BBox(*a[i]), BBox(*b[j])), abs=1e-12)


@given(boxes)
def test_iou_one_iff_identical(a):
    assert iou(a, a) == 1.0
    shifted = BBox(a.x + a.w * 0.01, a.y, a.w, a.h)
    assert iou(a, shifted) < 1.0


@pytest.mark.parametrize("prev,nxt,expected", [
    ((10, 10, 20, 40), (10, 10, 20, 40), (0, 0, 0, 0)),
    ((0, 0, 10, 10), (5, 10, 20, 10), (0.5, 1.0, math.log(2), 0)),
    ((0, 0, 4, 4), (0, 0, 2, 8), (0, 0, -math.log(2), math.log(2))),
])
def test_encode_examples(prev, nxt, expected):
    m = encode_motion(BBox(*prev), BBox(*nxt))
    assert isinstance(m, MotionDelta)
    assert m == pytest.approx(expected, abs=1e-15)


def test_decode_examples():
    assert decode_motion(BBox(10, 10, 20, 40), MotionDelta.zero()) == BBox(10, 10, 20, 40)
    out = decode_motion(BBox(0, 0, 10, 10), MotionDelta(0.5, 1.0, math.log(2), 0.0))
    assert out.as_tuple() == pytest.approx((5, 10, 20, 10), rel=1e-12)


def _rel_err(a: BBox, b: BBox) -> float:
    return max(abs(p - q) / max(abs(q), 1.0) for p, q in zip(a.as_tuple(), b.as_tuple()))


def test_roundtrip_random_1000():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        a = BBox(*rng.uniform(-1e3, 1e3, 2), *rng.uniform(1, 1e4, 2))
        b = BBox(*rng.uniform(-1e3, 1e3, 2), *rng.uniform(1, 1e4, 2))
        worst = max(worst, _rel_err(decode_motion(a, encode_motion(a, b)), b))
    assert worst < 1e-9


@given(boxes, boxes)
def test_roundtrip_property(a, b):
    assert _rel_err(decode_motion(a, encode_motion(a, b)), b) < 1e-9


@pytest.mark.parametrize("target,r,expected", [
    ((10, 10, 10, 10), 1, (10, 10, 10, 10)),
    ((10, 10, 10, 10), 2, (5, 5, 20, 20)),
    ((0, 0, 4, 8), 2, (-2, -4, 8, 16)),
])
def test_search_region_examples(target, r, expected):
    assert search_region(BBox(*target), r).as_tuple() == pytest.approx(expected)


def test_search_region_rejects_small_ratio():
    with pytest.raises(ValueError):
        search_region(BBox(0, 0, 1, 1), 0.5)


@given(boxes, st.floats(1.0, 10.0))
def test_search_region_properties(a, r):
    s = search_region(a, r)
    assert s.cx == pytest.approx(a.cx, abs=1e-9 * max(1, abs(a.cx)))
    assert s.cy == pytest.approx(a.cy, abs=1e-9 * max(1, abs(a.cy)))
    assert s.w / s.h == pytest.approx(a.w / a.h, rel=1e-12)
    assert iou(a, s) == pytest.approx(1 / r ** 2, rel=1e-9)


def test_visibility_and_embedding_checks():
    assert check_visibility(0.0) == 0.0 and check_visibility(1.0) == 1.0
    with pytest.raises(ValueError):
        check_visibility(1.01)
    e = as_embedding(np.ones(128))
    assert e.shape == (128,)
    with pytest.raises(ValueError):
        as_embedding(np.ones(127))
    with pytest.raises(ValueError):
        as_embedding([np.nan] * 128)
