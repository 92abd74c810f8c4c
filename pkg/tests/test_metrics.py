import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance_map
from oracles import aji_brute, dice_brute, mpq_brute, pq_brute
from repsnet.metrics import aji, dice, evaluate, instance_classes, mpq, pq, summarize


def test_dice_frozen():
    x = np.zeros((4, 4), int)
    y = np.zeros((4, 4), int)
    x[:2] = 1   # 8 pixels
    y[1:3] = 1  # 8 pixels, 4 shared
    assert dice(x, y) == 0.5


def test_dice_empty_and_shape():
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 0
    with pytest.raises(ValueError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))


def test_aji_frozen():
    assert aji(np.array([[1, 1, 1, 1]]), np.array([[2, 2, 0, 0]])) == 0.5
    # an unmatched prediction enlarges the union by its area
    assert math.isclose(aji(np.array([[1, 1, 1, 1, 0, 0]]), np.array([[2, 2, 2, 2, 0, 3]])), 0.8)


def test_aji_without_predictions():
    assert aji(np.array([[1, 1]]), np.zeros((1, 2), int)) == 0


@pytest.mark.parametrize("covered,expected", [(2, 0.0), (3, 0.6)])
def test_pq_match_threshold(covered, expected):
    gt = np.ones((1, 5), int)
    pred = np.zeros((1, 5), int)
    pred[0, :covered] = 4
    assert math.isclose(pq(gt, pred).pq, expected)


def test_pq_exactly_half_is_not_a_match():
    gt = np.array([[1, 1, 0, 0]])
    pred = np.array([[1, 1, 1, 1]])
    assert pq(gt, pred).tp == 0


def test_pq_counts():
    gt = np.array([[1, 1, 0, 2, 2, 0, 3]])
    pred = np.array([[5, 5, 0, 0, 0, 7, 0]])
    r = pq(gt, pred)
    assert (r.tp, r.fp, r.fn) == (1, 1, 2)
    assert math.isclose(r.pq, 1 / (1 + 1.5))


def test_metrics_match_brute_force(rng):
    for _ in range(100):
        gt = random_instance_map(rng, int(rng.integers(4, 17)), int(rng.integers(4, 17)), 4)
        pred = random_instance_map(rng, *gt.shape, 4)
        assert abs(dice(gt, pred) - dice_brute(gt, pred)) <= 1e-9
        assert abs(aji(gt, pred) - aji_brute(gt, pred)) <= 1e-9
        assert abs(pq(gt, pred).pq - pq_brute(gt, pred)) <= 1e-9


def test_identical_maps_score_one(rng):
    for _ in range(10):
        gt = random_instance_map(rng, 16, 16, 4)
        if gt.any():
            assert dice(gt, gt) == aji(gt, gt) == pq(gt, gt).pq == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_label_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    gt = random_instance_map(r, 12, 12, 4)
    pred = random_instance_map(r, 12, 12, 4)
    perm = np.r_[0, r.permutation(np.arange(1, 5)) + 10]
    renamed = perm[pred]
    assert pq(gt, renamed).pq == pytest.approx(pq(gt, pred).pq, abs=1e-12)
    assert dice(gt, renamed) == dice(gt, pred)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pq_bounded_by_detection(seed):
    r = np.random.default_rng(seed)
    res = pq(random_instance_map(r, 12, 12, 4), random_instance_map(r, 12, 12, 4))
    assert 0 <= res.pq <= res.dq <= 1
    assert res.sq == 0 or 0.5 < res.sq <= 1


def test_mpq_wrong_classes_is_zero():
    gt = np.array([[1, 1, 0, 2, 2]])
    m, per_class = mpq(gt, {1: 1, 2: 1}, gt, {1: 2, 2: 2})
    assert m == 0 and per_class[1] == 0 and per_class[2] == 0
    assert np.isnan(per_class[3])


def test_mpq_matches_brute_force(rng):
    for _ in range(30):
        gt = random_instance_map(rng, 14, 14, 4)
        pred = random_instance_map(rng, 14, 14, 4)
        gc = {int(k): int(rng.integers(1, 4)) for k in np.unique(gt) if k}
        pc = {int(k): int(rng.integers(1, 4)) for k in np.unique(pred) if k}
        ref = mpq_brute(gt, gc, pred, pc)
        got = mpq(gt, gc, pred, pc)[0]
        assert (np.isnan(ref) and np.isnan(got)) or abs(got - ref) <= 1e-9


def test_instance_classes():
    inst = np.array([[1, 1, 1, 2]])
    types = np.array([[3, 3, 4, 6]])
    assert instance_classes(inst, types) == {1: 3, 2: 6}


def test_summarize_means_per_image():
    gt = np.array([[1, 1, 0, 2, 2]])
    perfect = evaluate(gt, {1: 1, 2: 3}, gt, {1: 1, 2: 3})
    half = evaluate(gt, {1: 1, 2: 3}, np.array([[1, 1, 0, 0, 0]]), {1: 1})
    s = summarize([perfect, half])
    assert s["pq"] == pytest.approx((1 + pq(gt, np.array([[1, 1, 0, 0, 0]])).pq) / 2)
    assert s["pq_class1"] == 1.0 and s["pq_class3"] == 0.5
    assert np.isnan(s["pq_class2"])
    assert s["mpq"] == pytest.approx(0.75)
    assert (s["tp"], s["fp"], s["fn"]) == (3, 0, 1)
    with pytest.raises(ValueError):
        summarize([])
