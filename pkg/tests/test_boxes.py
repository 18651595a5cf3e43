import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mprcnn.boxes import (BBOX_CLAMP, Box, clip_to_image, context_region, decode, encode, iou, iou_matrix,
                          nms)

import oracles


def random_boxes(rng, n, lo=1.0, hi=40.0, span=60.0):
    xy = rng.uniform(-10, span, size=(n, 2))
    wh = rng.uniform(lo, hi, size=(n, 2))
    return np.concatenate([xy, wh], axis=1)


box_st = st.tuples(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.5, 200), st.floats(0.5, 200))


# -- iou --------------------------------------------------------------------------------------

def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0
    assert oracles.raster_iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(50 / 150)
    assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3)


def test_iou_rejects_degenerate():
    with pytest.raises(ValueError):
        iou((0, 0, 0, 5), (0, 0, 5, 5))


@settings(max_examples=200, deadline=None)
@given(a=box_st, b=box_st)
def test_iou_symmetric_bounded_matches_oracle(a, b):
    v = iou(a, b)
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(oracles.iou(a, b), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(l=st.integers(-5, 5), t=st.integers(-5, 5), w=st.integers(1, 8), h=st.integers(1, 8),
       l2=st.integers(-5, 5), t2=st.integers(-5, 5), w2=st.integers(1, 8), h2=st.integers(1, 8))
def test_iou_matches_rasterisation_on_integer_boxes(l, t, w, h, l2, t2, w2, h2):
    assert iou((l, t, w, h), (l2, t2, w2, h2)) == pytest.approx(
        oracles.raster_iou((l, t, w, h), (l2, t2, w2, h2)), abs=1e-12)


# -- encode / decode --------------------------------------------------------------------------------

def test_encode_examples():
    np.testing.assert_allclose(encode((0, 0, 32, 32), (0, 0, 32, 32)), 0.0)
    anchor = (0, 0, 32, 32)           # center (16, 16)
    gt = (-12, 0, 64, 32)             # center (20, 16)
    np.testing.assert_allclose(encode(gt, anchor), [0.125, 0.0, math.log(2), 0.0], atol=1e-12)
    np.testing.assert_allclose(encode(gt, anchor), oracles.encode(gt, anchor), atol=1e-12)


def test_decode_examples():
    anchor = (0, 0, 32, 32)
    np.testing.assert_allclose(decode(np.zeros(4), anchor), anchor)
    np.testing.assert_allclose(decode([0.125, 0, math.log(2), 0], anchor), (-12, 0, 64, 32), atol=1e-12)
    out = decode([0, 0, 100, 0], anchor)
    assert out[2] == pytest.approx(math.exp(BBOX_CLAMP) * 32)


def test_encode_decode_round_trip_10000_pairs():
    rng = np.random.default_rng(0)
    gts = random_boxes(rng, 10000, 2, 300)
    anchors = np.concatenate([gts[:, :2] + rng.uniform(-20, 20, (10000, 2)),
                              gts[:, 2:] * np.exp(rng.uniform(-3, 3, (10000, 2)))], axis=1)
    err = np.abs(decode(encode(gts, anchors), anchors) - gts)
    assert err.max() <= 1e-6


@settings(max_examples=100, deadline=None)
@given(gt=box_st, anchor=box_st)
def test_round_trip_property(gt, anchor):
    t = encode(gt, anchor)
    if np.all(np.abs(t[2:]) <= BBOX_CLAMP):
        np.testing.assert_allclose(decode(t, anchor), gt, atol=1e-6)


# -- context / clip ----------------------------------------------------------------------------------

def test_context_examples():
    np.testing.assert_allclose(context_region((10, 20, 30, 40)), (-20, 20, 90, 120))
    np.testing.assert_allclose(context_region((0, 0, 7, 9)), (-7, 0, 21, 27))


@settings(max_examples=100, deadline=None)
@given(b=box_st)
def test_context_twice_scales_area_by_81(b):
    c2 = context_region(context_region(b))
    assert c2[2] * c2[3] == pytest.approx(81 * b[2] * b[3], rel=1e-12)


def test_clip_examples():
    np.testing.assert_allclose(clip_to_image((5, 5, 10, 10), 64, 64), (5, 5, 10, 10))
    np.testing.assert_allclose(clip_to_image((-20, 20, 90, 120), 64, 64), (0, 20, 64, 44))
    out = clip_to_image((100, 100, 5, 5), 64, 64)
    assert out[2] == 0 and out[3] == 0


@settings(max_examples=100, deadline=None)
@given(b=box_st, w=st.integers(1, 120), h=st.integers(1, 120))
def test_clip_is_interval_intersection(b, w, h):
    out = clip_to_image(b, w, h)
    x1, x2 = max(b[0], 0), min(b[0] + b[2], w)
    y1, y2 = max(b[1], 0), min(b[1] + b[3], h)
    if x2 > x1 and y2 > y1:
        np.testing.assert_allclose(out, (x1, y1, x2 - x1, y2 - y1), atol=1e-9)
    else:
        assert out[2] == 0 and out[3] == 0


# -- nms ---------------------------------------------------------------------------------------------

def test_nms_examples():
    assert list(nms([(0, 0, 5, 5)], [0.3], 0.5)) == [0]
    assert list(nms([(0, 0, 5, 5), (0, 0, 5, 5)], [0.9, 0.8], 0.5)) == [0]
    assert list(nms([(0, 0, 5, 5), (0, 0, 5, 5)], [0.8, 0.9], 0.5)) == [1]
    assert list(nms([(0, 0, 5, 5), (0, 0, 5, 5)], [0.5, 0.5], 0.5)) == [0]
    assert len(nms(np.zeros((0, 4)), [], 0.5)) == 0


def test_nms_five_boxes_exhaustive_check():
    rng = np.random.default_rng(11)
    for _ in range(200):
        b = random_boxes(rng, 5, 5, 30, 30)
        s = rng.random(5)
        kept = [int(i) for i in nms(b, s, 0.4)]
        assert oracles.nms_is_valid(b, s, 0.4, kept)
        assert kept == oracles.nms(b, s, 0.4)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), thr=st.floats(0.1, 0.9), dup=st.integers(0, 7))
def test_nms_antichain_and_duplicate_invariance(seed, thr, dup):
    rng = np.random.default_rng(seed)
    b = random_boxes(rng, 8, 5, 30, 30)
    s = rng.integers(0, 4, 8) / 4.0     # coarse scores force ties
    kept = nms(b, s, thr)
    ious = iou_matrix(b[kept], b[kept])
    np.fill_diagonal(ious, 0)
    assert np.all(ious <= thr)
    b2 = np.vstack([b, b[dup]])
    s2 = np.append(s, s[dup])
    kept2 = nms(b2, s2, thr)
    assert sorted(map(tuple, b2[kept2])) == sorted(map(tuple, b[kept]))


def test_box_tuple():
    assert tuple(Box(1, 2, 3, 4).array()) == (1, 2, 3, 4)
