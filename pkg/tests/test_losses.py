import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repsnet.gradcheck import check_ce_dice, check_nb_loss, check_smooth_l1
from repsnet.groundtruth import isoheight_from_boundary
from repsnet.losses import (
    IsoheightConfig,
    LossWeights,
    NonFiniteLoss,
    ce_plus_dice,
    nb_loss,
    nb_loss_from_positions,
    smooth_l1,
    total_loss,
)
from repsnet.postprocess import vote_positions


def test_uniform_logits_two_classes():
    logits = np.zeros((1, 2, 4, 4))
    targets = np.zeros((1, 4, 4), dtype=int)
    targets[0, :2] = 1
    loss, _ = ce_plus_dice(logits, targets)
    m = 16
    dice = (m / 2 + 1) / (m + 1)  # per class: (2 * 0.5 * 8 + 1) / (8 + 8 + 1)
    assert math.isclose(loss, math.log(2) + 1 - dice, rel_tol=1e-12)


def test_saturated_correct_logits_near_zero():
    targets = np.random.default_rng(0).integers(0, 3, (2, 5, 5))
    logits = np.where(np.arange(3)[None, :, None, None] == targets[:, None], 40.0, -40.0)
    loss, grad = ce_plus_dice(logits, targets)
    assert loss < 1e-9
    assert np.abs(grad).max() < 1e-9


def test_ce_dice_rejects_bad_targets():
    with pytest.raises(ValueError):
        ce_plus_dice(np.zeros((1, 2, 3, 3)), np.full((1, 3, 3), 2))
    with pytest.raises(ValueError):
        ce_plus_dice(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3), int), class_count=7)


@pytest.mark.parametrize("classes", [2, 7])
def test_ce_dice_gradient(rng, classes):
    assert check_ce_dice(rng, classes)[0].error <= 1e-4


@pytest.mark.parametrize("residual,expected", [(0.5, 0.125), (-0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_smooth_l1_branches(residual, expected):
    target = np.ones((1, 4, 3, 3))
    loss, _ = smooth_l1(target + residual, target, np.ones((1, 3, 3), bool))
    assert math.isclose(loss, expected)


def test_smooth_l1_ignores_background(rng):
    target = rng.uniform(0, 5, (2, 4, 5, 5))
    fg = rng.random((2, 5, 5)) < 0.5
    pred = target + rng.normal(0, 2, target.shape)
    pred2 = np.where(fg[:, None], pred, 1e6)
    assert smooth_l1(pred, target, fg)[0] == smooth_l1(pred2, target, fg)[0]
    assert np.all(smooth_l1(pred, target, fg)[1][:, :, ~fg[0]][0] == 0)


def test_smooth_l1_matches_elementwise_oracle(rng):
    target = rng.uniform(0, 5, (2, 4, 6, 6))
    pred = target + rng.normal(0, 1.5, target.shape)
    fg = rng.random((2, 6, 6)) < 0.6
    vals = []
    for n, c, y, x in np.ndindex(*target.shape):
        if fg[n, y, x]:
            d = abs(pred[n, c, y, x] - target[n, c, y, x])
            vals.append(0.5 * d * d if d < 1 else d - 0.5)
    assert abs(smooth_l1(pred, target, fg)[0] - np.mean(vals)) <= 1e-6


def test_smooth_l1_empty_foreground():
    loss, grad = smooth_l1(np.ones((1, 4, 3, 3)), np.zeros((1, 4, 3, 3)), np.zeros((1, 3, 3), bool))
    assert loss == 0 and not grad.any()


def test_smooth_l1_gradient(rng):
    assert check_smooth_l1(rng)[0].error <= 1e-4


def _square_case(size=9):
    inst = np.zeros((size, size), dtype=int)
    inst[2:7, 2:7] = 1
    from repsnet.groundtruth import bd_from_instances, inner_boundary
    return inst, bd_from_instances(inst), isoheight_from_boundary(inner_boundary(inst))


def test_nb_loss_zero_on_exact_boundary():
    inst, bd, psi = _square_case()
    loss, _ = nb_loss(bd[None].astype(np.float64), (inst > 0)[None], psi[None])
    assert loss == 0.0


def test_nb_loss_saturates():
    psi = np.full((1, 8, 8), 5)
    fg = np.ones((1, 8, 8), bool)
    loss, _ = nb_loss(np.zeros((1, 4, 8, 8)), fg, psi)
    v = 4 * 64
    assert math.isclose(loss, 5 * v / (5 * v + 1.0))
    assert loss < 1


def test_nb_loss_empty_foreground():
    loss, grad = nb_loss(np.ones((1, 4, 5, 5)), np.zeros((1, 5, 5), bool), np.full((1, 5, 5), 5))
    assert loss == 0 and not grad.any()
    assert nb_loss_from_positions([], [], np.zeros((3, 3))) == 0


def test_nb_loss_matches_direct_formula(rng):
    cfg = IsoheightConfig(tau=4, e=0.5)
    for _ in range(10):
        psi = rng.integers(0, 5, (2, 10, 10))
        fg = rng.random((2, 10, 10)) < 0.4
        bd = rng.uniform(0, 6, (2, 4, 10, 10))
        total, count = 0.0, 0
        for n in range(2):
            rows, cols = vote_positions(bd[n], fg[n])
            total += psi[n][rows, cols].sum()
            count += len(rows)
        assert abs(nb_loss(bd, fg, psi, cfg)[0] - total / (4 * count + 0.5)) <= 1e-9


def test_nb_loss_from_positions_formula():
    psi = np.array([[0, 1, 2], [3, 4, 5]])
    assert math.isclose(nb_loss_from_positions([0, 1, 1], [2, 0, 2], psi, tau=5, e=1.0), 10 / 16)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_nb_loss_below_one(seed, tau):
    r = np.random.default_rng(seed)
    psi = r.integers(0, tau + 1, (1, 8, 8))
    loss, _ = nb_loss(r.uniform(0, 10, (1, 4, 8, 8)), r.random((1, 8, 8)) < 0.5, psi, IsoheightConfig(tau))
    assert 0 <= loss < 1


def test_nb_loss_unit_step_gradient(rng):
    assert check_nb_loss(rng)[0].error <= 1e-4


def test_nb_gradient_points_toward_boundary():
    inst, bd, psi = _square_case()
    pred = bd[None].astype(np.float64).copy()
    pred[0, 1, 4, 3] += 1  # right distance overshoots by one pixel
    _, grad = nb_loss(pred, (inst > 0)[None], psi[None])
    # increasing it further moves deeper into background, psi rises: positive slope
    assert grad[0, 1, 4, 3] > 0


def test_isoheight_config_validation():
    with pytest.raises(ValueError):
        IsoheightConfig(tau=0)
    with pytest.raises(ValueError):
        IsoheightConfig(e=0)
    with pytest.raises(ValueError):
        LossWeights(np=-1)


def _random_problem(rng, n=2, h=8, w=8):
    outputs = {"np": rng.normal(size=(n, 2, h, w)), "nt": rng.normal(size=(n, 7, h, w)),
               "bd": rng.uniform(0, 4, (n, 4, h, w))}
    fg = rng.random((n, h, w)) < 0.5
    targets = {"np": fg.astype(int), "nt": np.where(fg, rng.integers(1, 7, (n, h, w)), 0),
               "bd": rng.uniform(0, 4, (n, 4, h, w)),
               "psi": rng.integers(0, 6, (n, h, w))}
    return outputs, targets


def test_total_loss_zero_weights(rng):
    outputs, targets = _random_problem(rng)
    loss, parts, grads = total_loss(outputs, targets, LossWeights(0, 0, 0, 0))
    assert loss == 0 and all(p > 0 for p in parts.values())
    assert not any(g.any() for g in grads.values())


def test_total_loss_projection(rng):
    outputs, targets = _random_problem(rng)
    loss, _, grads = total_loss(outputs, targets, LossWeights(1, 0, 0, 0))
    ref, gref = ce_plus_dice(outputs["np"], targets["np"], 2)
    assert loss == ref and np.array_equal(grads["np"], gref)


def test_total_loss_recomposition(rng):
    outputs, targets = _random_problem(rng)
    w = LossWeights(0.3, 1.7, 0.9, 2.5)
    loss, parts, _ = total_loss(outputs, targets, w)
    assert abs(loss - (0.3 * parts["np"] + 1.7 * parts["nt"] + 0.9 * parts["bd"] + 2.5 * parts["nb"])) <= 1e-9


def test_weight_scales_gradient_linearly(rng):
    outputs, targets = _random_problem(rng)
    _, _, g1 = total_loss(outputs, targets, LossWeights(1, 1, 0, 1))
    _, _, g3 = total_loss(outputs, targets, LossWeights(1, 1, 0, 3))
    assert np.allclose(g3["bd"], 3 * g1["bd"])
    assert np.array_equal(g3["np"], g1["np"])


def test_total_loss_flags_non_finite(rng):
    outputs, targets = _random_problem(rng)
    outputs["bd"][0, 0, 0, 0] = np.nan
    targets["np"][0, 0, 0] = 1
    with pytest.raises(NonFiniteLoss, match="bd"):
        total_loss(outputs, targets)
