import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cimseg.masks import (BinaryMask, CanvasMismatchError, MaskSet, area, box_iou, containment_matrix,
                          cross_iou, intersection_area, iou, iou_matrix, mask_nms, mean_threshold)
from oracles import d_containment, d_inter, d_iou, d_mean_threshold, d_nms, dense


@st.composite
def grids(draw, n=1, max_side=16):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    return [draw(arrays(bool, (h, w))) for _ in range(n)]


def m(h, w, runs):
    return BinaryMask(h, w, tuple(runs))


# -- representation ------------------------------------------------------------


def test_area_examples():
    assert area(BinaryMask.empty(4, 4)) == 0
    assert area(BinaryMask.full(4, 4)) == 16
    assert area(m(4, 4, [(0, 3), (5, 2)])) == 5


@pytest.mark.parametrize("runs", [[(0, 3), (3, 2)], [(4, 2), (0, 1)], [(0, 0)], [(15, 2)], [(-1, 2)]])
def test_non_canonical_runs_rejected(runs):
    with pytest.raises(ValueError):
        BinaryMask(4, 4, tuple(runs))


def test_from_runs_merges_touching_and_overlapping():
    assert BinaryMask.from_runs(4, 4, [(3, 2), (0, 3), (4, 3)]).runs == ((0, 7),)


@given(grids())
def test_dense_round_trip(gs):
    g = gs[0]
    mk = BinaryMask.from_dense(g)
    assert np.array_equal(mk.to_dense(), g)
    assert np.array_equal(dense(mk), g)
    assert mk.area == int(g.sum())
    assert BinaryMask.from_runs(mk.height, mk.width, reversed(mk.runs)) == mk


@given(grids())
def test_json_round_trip(gs):
    mk = BinaryMask.from_dense(gs[0])
    assert BinaryMask.from_dict(json.loads(json.dumps(mk.to_dict()))) == mk


def test_from_dict_rejects_garbage():
    with pytest.raises(ValueError):
        BinaryMask.from_dict({"h": 2, "w": 2, "runs": [[0]]})
    with pytest.raises(ValueError):
        BinaryMask.from_dict({"h": 2, "runs": []})


def test_from_box_clips_to_canvas():
    b = BinaryMask.from_box(4, 5, -2, 3, 2, 9)
    assert b.area == 4 and b.bbox() == (0, 3, 2, 5)
    assert BinaryMask.from_box(4, 4, 3, 3, 3, 4).area == 0


@given(grids(), st.data())
def test_contains_pixel(gs, data):
    g = gs[0]
    mk = BinaryMask.from_dense(g)
    r = data.draw(st.integers(0, g.shape[0] - 1))
    c = data.draw(st.integers(0, g.shape[1] - 1))
    assert mk.contains_pixel(r, c) == bool(g[r, c])


# -- pairwise kernels --------------------------------------------------------------


def test_intersection_and_iou_examples():
    assert intersection_area(m(2, 4, [(0, 4)]), m(2, 4, [(2, 4)])) == 2
    full = BinaryMask.full(2, 4)
    top = m(2, 4, [(0, 4)])
    assert iou(full, top) == 0.5
    assert iou(full, full) == 1.0
    assert iou(top, m(2, 4, [(4, 4)])) == 0.0
    assert iou(BinaryMask.empty(3, 3), BinaryMask.empty(3, 3)) == 0.0


def test_canvas_mismatch():
    with pytest.raises(CanvasMismatchError):
        iou(BinaryMask.full(2, 3), BinaryMask.full(3, 2))
    with pytest.raises(CanvasMismatchError):
        MaskSet.of([BinaryMask.full(2, 3), BinaryMask.full(3, 2)])


@given(grids(n=2))
def test_pair_kernels_match_dense(gs):
    a, b = (BinaryMask.from_dense(g) for g in gs)
    assert intersection_area(a, b) == d_inter(*gs) == intersection_area(b, a)
    v = iou(a, b)
    assert v == d_iou(*gs)
    assert 0.0 <= v <= 1.0
    if a.area:
        assert (v == 1.0) == (a == b)


@given(grids(n=2))
def test_box_iou_is_mask_iou_of_bounding_boxes(gs):
    a, b = (BinaryMask.from_dense(g) for g in gs)
    if a.area and b.area:
        boxes = [BinaryMask.from_box(a.height, a.width, *x.bbox()) for x in (a, b)]
        assert box_iou(a, b) == pytest.approx(iou(*boxes), abs=1e-15)
    else:
        assert box_iou(a, b) == 0.0


@settings(max_examples=60)
@given(grids(n=6, max_side=12))
def test_matrices_match_dense(gs):
    ms = MaskSet.of([BinaryMask.from_dense(g) for g in gs])
    im = iou_matrix(ms)
    cm = containment_matrix(ms)
    cross = cross_iou(ms.masks, ms.masks)
    for i in range(6):
        for j in range(6):
            assert im[i, j] == d_iou(gs[i], gs[j]) == cross[i, j]
            assert cm[i, j] == d_containment(gs[i], gs[j])
    assert np.array_equal(im, im.T)
    nonempty = [i for i in range(6) if ms[i].area]
    assert all(im[i, i] == 1.0 and cm[i, i] == 1.0 for i in nonempty)


def test_containment_examples():
    big = m(2, 4, [(0, 8)])
    part = m(2, 4, [(0, 4)])
    # 4-pixel column mask overlapping the 8-pixel row mask on 3 pixels
    shifted = m(3, 4, [(5, 4)])
    big3 = m(3, 4, [(0, 8)])
    assert containment_matrix(MaskSet.of([big, part]), [1])[0, 0] == 1.0
    assert containment_matrix(MaskSet.of([big3, shifted]), [1])[0, 0] == 0.75
    assert containment_matrix(MaskSet.of([big, BinaryMask.empty(2, 4)]), [1])[0, 0] == 0.0
    with pytest.raises(IndexError):
        containment_matrix(MaskSet.of([big]), [1])


def test_iou_matrix_singleton_and_disjoint():
    assert iou_matrix(MaskSet.of([BinaryMask.full(2, 2)])).tolist() == [[1.0]]
    im = iou_matrix(MaskSet.of([m(2, 2, [(0, 1)]), m(2, 2, [(3, 1)])]))
    assert im[0, 1] == im[1, 0] == 0.0


# -- NMS ---------------------------------------------------------------------------


def test_nms_examples():
    a = m(4, 4, [(0, 6)])
    ms = MaskSet.of([a, a])
    assert mask_nms([], ms, 0.5) == []
    assert mask_nms([1], ms, 0.5) == [1]
    assert mask_nms([0, 1], ms, 0.99) == [0]
    assert mask_nms([1, 0], ms, 0.0) == [1]


@settings(max_examples=80)
@given(grids(n=10, max_side=12), st.sampled_from([0.0, 0.25, 0.5, 0.7]), st.randoms(use_true_random=False))
def test_nms_matches_greedy_oracle(gs, thr, rnd):
    ms = MaskSet.of([BinaryMask.from_dense(g) for g in gs])
    order = list(range(10))
    rnd.shuffle(order)
    kept = mask_nms(order, ms, thr)
    assert kept == d_nms(order, gs, thr)
    assert kept[0] == order[0]
    assert set(kept) <= set(order)
    assert all(iou(ms[i], ms[j]) <= thr for i in kept for j in kept if i != j)


def test_nms_box_mode_differs_for_l_shapes():
    # an L and the square that completes it: low mask IoU, identical boxes
    ell = BinaryMask.from_box(6, 6, 0, 0, 4, 1).union(BinaryMask.from_box(6, 6, 3, 0, 4, 4))
    square = BinaryMask.from_box(6, 6, 0, 0, 4, 4)
    ms = MaskSet.of([ell, square])
    assert mask_nms([0, 1], ms, 0.5) == [0, 1]
    assert mask_nms([0, 1], ms, 0.5, mode="box") == [0]


# -- mean threshold --------------------------------------------------------------------


def test_mean_threshold_examples():
    a = m(3, 3, [(0, 4)])
    assert mean_threshold(MaskSet.of([a]), 0.7) == a
    b = m(3, 3, [(5, 4)])
    assert mean_threshold(MaskSet.of([a, b]), 0.7).area == 0
    # 2 of 3 covering is 0.667, not above 0.7
    c1, c2, c3 = m(1, 6, [(0, 6)]), m(1, 6, [(0, 4)]), m(1, 6, [(2, 4)])
    assert mean_threshold(MaskSet.of([c1, c2, c3]), 0.7).runs == ((2, 2),)
    with pytest.raises(ValueError):
        mean_threshold(MaskSet(3, 3, ()), 0.7)


@settings(max_examples=80)
@given(grids(n=5, max_side=10), st.integers(1, 5), st.sampled_from([0.0, 0.2, 0.5, 0.7, 0.99]))
def test_mean_threshold_matches_dense(gs, k, thr):
    ms = MaskSet.of([BinaryMask.from_dense(g) for g in gs[:k]])
    assert np.array_equal(dense(mean_threshold(ms, thr)), d_mean_threshold(gs[:k], thr))
