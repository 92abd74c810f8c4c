import numpy as np
import pytest

from conftest import perfect_outputs, random_instance_map
from oracles import components_flood, nearest_assign_brute, vote_counts_loop
from repsnet.groundtruth import bd_from_instances, synth_sample
from repsnet.metrics import instance_classes, pq
from repsnet.postprocess import (
    BvmConfig,
    assign_boundary_pixels,
    bvm,
    bvm_votes,
    class_map,
    classify_instances,
    connected_components,
    round_half_away,
    segment,
)


def test_round_half_away_from_zero():
    assert np.array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, 0.49, -1.5])),
                          [1, 2, 3, -1, 0, -2])


def test_votes_match_loop(rng):
    for _ in range(20):
        mask = rng.random((12, 10)) < 0.5
        bd = rng.integers(0, 24, (4, 12, 10)) / 2.0  # plenty of exact halves
        assert np.array_equal(bvm_votes(bd, mask), vote_counts_loop(bd, mask))


def test_vote_total_is_four_per_pixel(rng):
    mask = rng.random((9, 9)) < 0.3
    assert bvm_votes(rng.uniform(0, 20, (4, 9, 9)), mask).sum() == 4 * mask.sum()


def test_threshold_is_strict():
    # one foreground pixel casts all four votes on itself
    mask = np.zeros((5, 5), bool)
    mask[2, 2] = True
    bd = np.zeros((4, 5, 5))
    assert bvm_votes(bd, mask)[2, 2] == 4
    assert bvm(bd, mask, BvmConfig(e_t=3))[2, 2]
    assert not bvm(bd, mask, BvmConfig(e_t=4))[2, 2]


def test_bvm_on_exact_square_marks_its_rim():
    inst = np.zeros((9, 9), int)
    inst[2:7, 2:7] = 1
    nb = bvm(bd_from_instances(inst).astype(float), inst > 0)
    assert nb[2, 2] and nb[2, 4] and nb[6, 6]
    assert not nb[3:6, 3:6].any()


def test_vote_shape_mismatch():
    with pytest.raises(ValueError):
        bvm_votes(np.zeros((4, 3, 3)), np.zeros((3, 4), bool))


def test_components_match_flood_fill(rng):
    for _ in range(20):
        mask = rng.random((15, 13)) < 0.55
        assert np.array_equal(connected_components(mask), components_flood(mask))


def test_diagonal_pixels_are_separate():
    labels = connected_components(np.eye(3, dtype=bool))
    assert labels.max() == 3


def test_nearest_rule_and_ties():
    inst = np.array([[1, 0, 0, 0, 2]])
    nb = np.array([[0, 1, 1, 1, 0]], bool)
    out = assign_boundary_pixels(inst, nb, np.ones_like(nb))
    # the middle pixel is equidistant and goes to the smaller id
    assert np.array_equal(out, [[1, 1, 1, 2, 2]])


def test_nearest_rule_matches_all_pairs_oracle(rng):
    for _ in range(15):
        mask = rng.random((14, 14)) < 0.7
        inst = connected_components(mask & (rng.random((14, 14)) < 0.5))
        nb = rng.random((14, 14)) < 0.6
        r_max = float(rng.choice([1.5, 3.0, 10.0]))
        assert np.array_equal(assign_boundary_pixels(inst, nb, mask, r_max),
                              nearest_assign_brute(inst, nb, mask, r_max))


def test_r_max_leaves_far_pixels_unlabeled():
    inst = np.zeros((1, 8), int)
    inst[0, 0] = 3
    nb = np.zeros((1, 8), bool)
    nb[0, 1:] = True
    out = assign_boundary_pixels(inst, nb, np.ones_like(nb), r_max=2)
    assert np.array_equal(out, [[3, 3, 3, 0, 0, 0, 0, 0]])


def test_background_boundary_pixels_stay_background():
    inst = np.array([[1, 0, 0]])
    nb = np.array([[0, 1, 1]], bool)
    mask = np.array([[1, 1, 0]], bool)
    assert np.array_equal(assign_boundary_pixels(inst, nb, mask), [[1, 1, 0]])


def test_classify_modal_and_ties():
    inst = np.array([[1, 1, 1, 2, 2, 3]])
    nt = np.array([[4, 4, 2, 5, 3, 0]])
    classes = classify_instances(inst, nt)
    # instance 2 ties between 3 and 5 -> 3; instance 3 sees only background
    assert classes == {1: 4, 2: 3, 3: 4}


def test_classify_fallback_without_any_class():
    assert classify_instances(np.array([[1, 1]]), np.zeros((1, 2), int)) == {1: 1}


def test_class_map():
    inst = np.array([[0, 1, 2]])
    assert np.array_equal(class_map(inst, {1: 5, 2: 2}), [[0, 5, 2]])


def test_blank_image_gives_no_instances():
    inst, classes = segment(np.stack([np.ones((8, 8)), np.zeros((8, 8))]),
                            np.zeros((7, 8, 8)), np.zeros((4, 8, 8)))
    assert not inst.any() and classes == {}


def test_touching_pair_split_by_bvm_merged_by_naive():
    inst = np.zeros((8, 12), int)
    inst[2:6, 2:6] = 1
    inst[2:6, 6:10] = 2
    types = np.where(inst > 0, 2, 0)
    outs = perfect_outputs(inst, types)
    split, _ = segment(*outs)
    merged, _ = segment(*outs, cfg=BvmConfig(post="naive"))
    assert split.max() == 2 and pq(inst, split).pq == 1.0
    assert merged.max() == 1


def test_perfect_outputs_recover_scenes():
    for seed in range(8):
        image, inst, types = synth_sample(seed)
        pred, classes = segment(*perfect_outputs(inst, types))
        assert pq(inst, pred).pq == 1.0
        gt_cls = instance_classes(inst, types)
        matched = {g: p for g, p, _ in pq(inst, pred).matches}
        assert all(classes[matched[g]] == c for g, c in gt_cls.items())


def test_random_maps_survive_round_trip(rng):
    # occlusion leaves thin and irregular pieces; demand most of them back
    scores = []
    while len(scores) < 10:
        inst = random_instance_map(rng, 24, 24, 4)
        if inst.any():
            pred, _ = segment(*perfect_outputs(inst, np.where(inst > 0, 1, 0)))
            scores.append(pq(inst, pred).dq)
    assert np.mean(scores) > 0.8


def test_config_validation():
    with pytest.raises(ValueError):
        BvmConfig(e_t=-1)
    with pytest.raises(ValueError):
        BvmConfig(post="watershed")
    with pytest.raises(ValueError):
        segment(np.zeros((2, 4, 4)), np.zeros((7, 4, 5)), np.zeros((4, 4, 4)))
