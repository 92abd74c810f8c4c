import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance_map
from oracles import bd_scan, chebyshev_brute, inner_boundary_loop
from repsnet.groundtruth import (
    DOWN,
    LEFT,
    RIGHT,
    UP,
    SynthSpec,
    apply_geometric,
    augment,
    bd_from_instances,
    inner_boundary,
    isoheight_from_boundary,
    make_targets,
    relabel_sequential,
    synth_sample,
)

SMALL = np.array([[1, 1, 0],
                  [1, 1, 2],
                  [0, 2, 2]])


def test_bd_small_frozen():
    bd = bd_from_instances(SMALL)
    assert np.array_equal(bd[LEFT], [[0, 1, 0], [0, 1, 0], [0, 0, 1]])
    assert np.array_equal(bd[RIGHT], [[1, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert np.array_equal(bd[UP], [[0, 0, 0], [1, 1, 0], [0, 0, 1]])
    assert np.array_equal(bd[DOWN], [[1, 1, 0], [0, 0, 1], [0, 0, 0]])


def test_bd_square_frozen():
    inst = np.zeros((7, 7), dtype=int)
    inst[1:6, 1:6] = 1
    bd = bd_from_instances(inst)
    assert np.array_equal(bd[LEFT, 3, 1:6], [0, 1, 2, 3, 4])
    assert np.array_equal(bd[DOWN, 1:6, 3], [4, 3, 2, 1, 0])
    assert bd[:, 0].sum() == 0


def test_bd_non_convex_first_exit():
    # a U shape: the ray leaves the instance at the notch and stops there
    inst = np.array([[1, 0, 1],
                     [1, 0, 1],
                     [1, 1, 1]])
    bd = bd_from_instances(inst)
    assert bd[RIGHT, 0, 0] == 0
    assert bd[RIGHT, 2, 0] == 2


def test_bd_matches_directional_scan(rng):
    for _ in range(20):
        inst = random_instance_map(rng, 20, 17, 5)
        assert np.array_equal(bd_from_instances(inst), bd_scan(inst))


def test_inner_boundary_matches_loop(rng):
    for _ in range(20):
        inst = random_instance_map(rng, 15, 15, 4)
        assert np.array_equal(inner_boundary(inst), inner_boundary_loop(inst))


def test_isoheight_frozen():
    b = np.zeros((1, 9), dtype=bool)
    b[0, 2] = True
    assert np.array_equal(isoheight_from_boundary(b, 3)[0], [2, 1, 0, 1, 2, 3, 3, 3, 3])


def test_isoheight_is_chebyshev_not_euclidean():
    b = np.zeros((5, 5), dtype=bool)
    b[0, 0] = True
    psi = isoheight_from_boundary(b, 5)
    assert psi[3, 3] == 3 and psi[4, 2] == 4


def test_isoheight_matches_brute_force(rng):
    for _ in range(20):
        b = rng.random((12, 14)) < 0.05
        for tau in (1, 3, 5):
            assert np.array_equal(isoheight_from_boundary(b, tau), chebyshev_brute(b, tau))


def test_isoheight_empty_and_invalid():
    assert np.all(isoheight_from_boundary(np.zeros((4, 4), bool), 5) == 5)
    with pytest.raises(ValueError):
        isoheight_from_boundary(np.zeros((4, 4), bool), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_isoheight_properties(seed, tau):
    b = np.random.default_rng(seed).random((10, 10)) < 0.1
    psi = isoheight_from_boundary(b, tau)
    assert psi.min() >= 0 and psi.max() <= tau
    assert np.array_equal(psi == 0, b)
    # 1-Lipschitz in the 8-neighborhood
    assert np.abs(np.diff(psi, axis=0)).max(initial=0) <= 1
    assert np.abs(np.diff(psi, axis=1)).max(initial=0) <= 1


def test_relabel_sequential():
    inst = np.array([[0, 5, 5], [9, 0, 2]])
    assert np.array_equal(relabel_sequential(inst), [[0, 2, 2], [3, 0, 1]])


def test_make_targets_consistent():
    types = np.where(SMALL == 1, 3, np.where(SMALL == 2, 5, 0))
    t = make_targets(SMALL, types)
    assert np.array_equal(t["np"], SMALL > 0)
    assert np.array_equal(t["nt"], types)
    assert np.array_equal(t["psi"][t["boundary"]], np.zeros(t["boundary"].sum()))


def test_synth_deterministic_and_well_formed():
    a = synth_sample(7)
    b = synth_sample(7)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    image, inst, types = a
    assert image.shape == (3, 64, 64) and image.dtype == np.float32
    assert image.min() >= 0 and image.max() <= 1
    assert np.allclose(image * 255, np.round(image * 255), atol=1e-3)
    ids = np.unique(inst)
    assert np.array_equal(ids, np.arange(len(ids)))
    for k in ids[1:]:
        cls = np.unique(types[inst == k])
        assert len(cls) == 1 and 1 <= cls[0] <= 6
    assert np.all(types[inst == 0] == 0)


def test_synth_differs_across_seeds():
    assert not np.array_equal(synth_sample(1)[1], synth_sample(2)[1])


def test_synth_produces_touching_instances():
    touching = 0
    for seed in range(10):
        inst = synth_sample(seed)[1]
        horiz = (inst[:, 1:] != inst[:, :-1]) & (inst[:, 1:] > 0) & (inst[:, :-1] > 0)
        vert = (inst[1:] != inst[:-1]) & (inst[1:] > 0) & (inst[:-1] > 0)
        touching += bool(horiz.any() or vert.any())
    assert touching >= 3


@pytest.mark.parametrize("spec", [SynthSpec(count_range=(3, 1)), SynthSpec(radius_range=(0, 2)),
                                  SynthSpec(height=10, width=10), SynthSpec(overlap_prob=2.0),
                                  SynthSpec(class_probs=(1.0, 1.0))])
def test_synth_spec_rejected(spec):
    with pytest.raises(ValueError):
        synth_sample(0, spec)


def test_hflip_swaps_left_right():
    image, inst, types = synth_sample(3)
    _, inst_f, _ = apply_geometric(image, inst, types, hflip=True)
    bd, bd_f = bd_from_instances(inst), bd_from_instances(inst_f)
    assert np.array_equal(bd_f[LEFT], bd[RIGHT][:, ::-1])
    assert np.array_equal(bd_f[UP], bd[UP][:, ::-1])


def test_augment_keeps_labels_aligned():
    image, inst, types = synth_sample(4)
    img2, inst2, types2 = augment(image, inst, types, np.random.default_rng(0))
    assert img2.shape == image.shape
    assert np.array_equal(types2 > 0, inst2 > 0)
    assert sorted(np.bincount(inst2.ravel())) == sorted(np.bincount(inst.ravel()))
    assert augment(image, inst, types, 0, enabled=False)[1] is inst
