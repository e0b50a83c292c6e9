import math

import numpy as np
import pytest

from ritseg import tensor as T
from ritseg.imageproc import label_edges, signed_distance_maps
from ritseg.losses import (
    LossWeights,
    ScheduleConfig,
    boundary_mask,
    boundary_weight_map,
    distance_targets,
    generalized_dice_loss,
    per_pixel_cross_entropy,
    schedule,
    surface_loss,
    total_loss,
)
from ritseg.tensor import ShapeError, Tape, Tensor

from .conftest import numeric_grad, rel_err


def random_probs(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, c=4):
    return (labels[:, None] == np.arange(c)[None, :, None, None]).astype(np.float64)


def gdl_oracle(p, labels, absent="exclude"):
    n, c, h, w = p.shape
    vals = []
    for i in range(n):
        num = den = 0.0
        for k in range(c):
            count = sum(1 for r in range(h) for q in range(w) if labels[i, r, q] == k)
            wk = 1.0 / (count * count + 1e-5)
            if count == 0 and absent == "exclude":
                wk = 0.0
            for r in range(h):
                for q in range(w):
                    g = 1.0 if labels[i, r, q] == k else 0.0
                    num += wk * p[i, k, r, q] * g
                    den += wk * (p[i, k, r, q] + g)
        vals.append(1 - 2 * num / den)
    return sum(vals) / n


# -- cross entropy --------------------------------------------------------------------


def test_ce_examples():
    lab = np.array([[[0, 1]]])
    p = np.zeros((1, 4, 1, 2))
    p[0, 0, 0, 0] = 1.0
    p[0, :, 0, 1] = 0.25
    ce = per_pixel_cross_entropy(Tensor(p), lab).data
    assert ce[0, 0, 0] == 0.0
    assert ce[0, 0, 1] == pytest.approx(math.log(4), abs=1e-12)


def test_ce_matches_lookup(rng):
    p = random_probs(rng, (2, 4, 5, 6))
    lab = rng.integers(0, 4, size=(2, 5, 6))
    ce = per_pixel_cross_entropy(Tensor(p), lab).data
    for idx in np.ndindex(lab.shape):
        i, r, q = idx
        assert ce[idx] == pytest.approx(-math.log(p[i, lab[idx], r, q]), abs=1e-12)


def test_ce_floor_and_errors():
    p = np.zeros((1, 4, 1, 1))
    p[0, 1] = 1.0
    assert per_pixel_cross_entropy(Tensor(p), np.zeros((1, 1, 1), int)).data.item() == pytest.approx(
        -math.log(1e-7)
    )
    with pytest.raises(ValueError):
        per_pixel_cross_entropy(Tensor(p), np.full((1, 1, 1), 4))
    with pytest.raises(ShapeError):
        per_pixel_cross_entropy(Tensor(p), np.zeros((1, 2, 1), int))


# -- boundary weights -----------------------------------------------------------------


def test_boundary_weights_constant_map():
    np.testing.assert_array_equal(boundary_weight_map(np.zeros((12, 12), int)), 1.0)


def test_boundary_weights_values():
    lab = np.zeros((16, 16), int)
    lab[:, 8:] = 2
    w = boundary_weight_map(lab, 1.0, 20.0)
    assert set(np.unique(w)) == {1.0, 21.0}


def test_boundary_band_of_vertical_transition():
    lab = np.zeros((8, 8), int)
    lab[:, 4:] = 1
    edges = label_edges(lab)
    edge_cols = np.unique(np.argwhere(edges)[:, 1])
    assert len(edge_cols) == 1 and edge_cols[0] in (3, 4)
    # dilation oracle: two passes of a 3x3 square -> columns edge-2 .. edge+2, every row
    expected = np.zeros((8, 8), bool)
    e = edge_cols[0]
    expected[:, max(e - 2, 0) : e + 3] = True
    np.testing.assert_array_equal(boundary_mask(lab), expected)
    w = boundary_weight_map(lab)
    np.testing.assert_array_equal(w, np.where(expected, 21.0, 1.0))


def test_boundary_weight_batch():
    lab = np.zeros((2, 8, 8), int)
    lab[1, 4:] = 3
    w = boundary_weight_map(lab)
    assert w.shape == (2, 8, 8) and np.all(w[0] == 1.0) and w[1].max() == 21.0


# -- generalized Dice -----------------------------------------------------------------


def test_gdl_perfect_prediction():
    lab = np.random.default_rng(0).integers(0, 4, size=(2, 6, 6))
    assert generalized_dice_loss(Tensor(one_hot(lab)), lab).item() == pytest.approx(0.0, abs=1e-4)


def test_gdl_single_class_uniform():
    lab = np.zeros((1, 8, 8), int)
    p = np.full((1, 4, 8, 8), 0.25)
    assert generalized_dice_loss(Tensor(p), lab).item() == pytest.approx(0.6, abs=1e-3)


@pytest.mark.parametrize("absent", ["exclude", "epsilon"])
def test_gdl_matches_scalar_loop(rng, absent):
    for _ in range(5):
        p = random_probs(rng, (2, 4, 4, 4))
        lab = rng.integers(0, 3, size=(2, 4, 4))  # class 3 absent
        ours = generalized_dice_loss(Tensor(p), lab, absent).item()
        assert ours == pytest.approx(gdl_oracle(p, lab, absent), abs=1e-6)


def test_gdl_range(rng):
    for _ in range(20):
        p = random_probs(rng, (1, 4, 5, 5))
        lab = rng.integers(0, 4, size=(1, 5, 5))
        assert 0.0 <= generalized_dice_loss(Tensor(p), lab).item() <= 1.0


def test_gdl_unknown_policy(rng):
    with pytest.raises(ValueError):
        generalized_dice_loss(Tensor(random_probs(rng, (1, 4, 2, 2))), np.zeros((1, 2, 2), int), "drop")


# -- surface loss ---------------------------------------------------------------------


def test_sl_mass_on_boundary_is_zero():
    phi = np.zeros((1, 4, 3, 3))
    phi[:, :, 0] = 5.0
    p = np.zeros((1, 4, 3, 3))
    p[:, 0, 1:] = 1.0
    assert surface_loss(Tensor(p), phi).item() == 0.0


def test_sl_hard_correct_is_negative():
    lab = np.zeros((1, 12, 12), int)
    lab[0, 3:9, 3:9] = 2
    phi = distance_targets(lab)
    assert surface_loss(Tensor(one_hot(lab)), phi).item() < 0


def test_sl_single_row_by_hand():
    lab = np.array([[0, 0, 1, 1]])
    phi = signed_distance_maps(lab, 4)[None]
    np.testing.assert_array_equal(phi[0, 0, 0], [0, 0, 1, 2])
    np.testing.assert_array_equal(phi[0, 1, 0], [2, 1, 0, 0])
    np.testing.assert_array_equal(phi[0, 2:], 5.0)
    p = np.zeros((1, 4, 1, 4))
    p[0, :, 0, 0] = [0.7, 0.1, 0.1, 0.1]
    p[0, :, 0, 1] = [0.4, 0.4, 0.1, 0.1]
    p[0, :, 0, 2] = [0.2, 0.5, 0.2, 0.1]
    p[0, :, 0, 3] = [0.1, 0.6, 0.2, 0.1]
    hand = (
        0.7 * 0 + 0.1 * 2 + 0.1 * 5 + 0.1 * 5
        + 0.4 * 0 + 0.4 * 1 + 0.1 * 5 + 0.1 * 5
        + 0.2 * 1 + 0.5 * 0 + 0.2 * 5 + 0.1 * 5
        + 0.1 * 2 + 0.6 * 0 + 0.2 * 5 + 0.1 * 5
    ) / 16
    assert surface_loss(Tensor(p), phi).item() == pytest.approx(hand, abs=1e-12)


def test_sl_prefers_interior_mass(rng):
    lab = np.zeros((1, 10, 10), int)
    lab[0, 2:8, 2:8] = 1
    phi = distance_targets(lab)
    p = random_probs(rng, (1, 4, 10, 10))
    base = surface_loss(Tensor(p), phi).item()
    moved = p.copy()
    delta = 0.05
    moved[0, 1, 0, 0] -= delta  # phi > 0 there
    moved[0, 1, 5, 5] += delta  # phi < 0 there
    assert surface_loss(Tensor(moved), phi).item() < base


def test_sl_dims_checked(rng):
    with pytest.raises(ShapeError):
        surface_loss(Tensor(random_probs(rng, (1, 4, 3, 3))), np.zeros((1, 4, 3, 4)))


def test_distance_targets_normalized():
    lab = np.zeros((8, 6), int)
    lab[2:6, 2:4] = 1
    np.testing.assert_allclose(distance_targets(lab, True), distance_targets(lab) / math.hypot(8, 6))


# -- schedule -------------------------------------------------------------------------


def test_schedule_points():
    assert schedule(0).as_tuple() == (1, 20, 1, 0)
    assert schedule(100).as_tuple() == pytest.approx((1, 20, 0.2, 0.8))
    assert schedule(125).as_tuple() == (1, 20, 0, 1)
    assert schedule(150).as_tuple() == (1, 20, 0, 1)
    literal = ScheduleConfig(clamp=False)
    assert schedule(125, literal).as_tuple() == (1, 20, 1, 0)
    assert schedule(124, literal).as_tuple() == pytest.approx((1, 20, 1 / 125, 124 / 125))


def test_schedule_weights_sum_to_one():
    for cfg in (ScheduleConfig(), ScheduleConfig(clamp=False), ScheduleConfig(ramp_epochs=7)):
        for epoch in range(300):
            w = schedule(epoch, cfg)
            assert w.l3 + w.l4 == pytest.approx(1.0) and 0 <= w.l4 <= 1


def test_schedule_errors():
    with pytest.raises(ValueError):
        schedule(-1)
    with pytest.raises(ValueError):
        ScheduleConfig(ramp_epochs=0)


# -- total ----------------------------------------------------------------------------


def test_total_perfect_prediction_epoch0():
    lab = np.zeros((1, 16, 16), int)
    lab[0, 4:12, 4:12] = 1
    lab[0, 6:10, 6:10] = 3
    bundle = total_loss(Tensor(one_hot(lab)), lab, distance_targets(lab), schedule(0))
    assert bundle.total.item() == pytest.approx(0.0, abs=1e-3)


def test_total_recombination(rng):
    lab = rng.integers(0, 4, size=(2, 16, 16))
    lab[1, :8] = 0
    p = random_probs(rng, (2, 4, 16, 16))
    phi = distance_targets(lab)
    weights = LossWeights(1, 20, 0.5, 0.5)
    bundle = total_loss(Tensor(p), lab, phi, weights)
    B = np.stack([boundary_mask(x) for x in lab])
    ce = -np.log(np.take_along_axis(p, lab[:, None], 1)[:, 0])
    expected = (ce * (1 + 20 * B)).mean() + 0.5 * gdl_oracle(p, lab) + 0.5 * (phi * p).mean()
    assert bundle.total.item() == pytest.approx(expected, abs=1e-6)
    parts = bundle.values()
    assert parts["total"] == pytest.approx(parts["weighted_ce"] + 0.5 * parts["gdl"] + 0.5 * parts["sl"],
                                           abs=1e-12)


def test_total_ignores_boundary_without_l2(rng):
    lab = rng.integers(0, 4, size=(1, 8, 8))
    p = random_probs(rng, (1, 4, 8, 8))
    phi = distance_targets(lab)
    w = LossWeights(1, 0, 1, 0)
    b1 = rng.random((1, 8, 8)) < 0.3
    b2 = rng.permutation(b1.ravel()).reshape(b1.shape)
    a = total_loss(Tensor(p), lab, phi, w, boundary=b1).total.item()
    b = total_loss(Tensor(p), lab, phi, w, boundary=b2).total.item()
    assert a == b


def test_total_boundary_dims_checked(rng):
    lab = np.zeros((1, 4, 4), int)
    with pytest.raises(ShapeError):
        total_loss(Tensor(random_probs(rng, (1, 4, 4, 4))), lab, distance_targets(lab), LossWeights(),
                   boundary=np.zeros((1, 4, 5)))


@pytest.mark.parametrize("term", ["ce", "gdl", "gdl_eps", "sl"])
def test_term_gradients_wrt_probs(rng, term):
    lab = rng.integers(0, 3, size=(2, 4, 5))
    phi = distance_targets(lab)
    wmap = boundary_weight_map(lab)
    p = random_probs(rng, (2, 4, 4, 5))

    def build(t):
        if term == "ce":
            return T.mean(T.mul_const(per_pixel_cross_entropy(t, lab), wmap))
        if term == "gdl":
            return generalized_dice_loss(t, lab)
        if term == "gdl_eps":
            return generalized_dice_loss(t, lab, "epsilon")
        return surface_loss(t, phi)

    P = Tensor(p, requires_grad=True)
    with Tape() as tape:
        loss = build(P)
    tape.backward(loss)
    # the 1e5 weight of an absent class shrinks the other gradients to ~1e-8, so a
    # larger central step keeps roundoff below the truncation error
    eps = 1e-4 if term == "gdl_eps" else 1e-6
    num = numeric_grad(lambda: build(Tensor(p)).item(), p, eps)
    assert rel_err(num, P.grad) < 1e-6


def test_total_gradient_wrt_logits(rng):
    lab = rng.integers(0, 4, size=(2, 6, 6))
    phi = distance_targets(lab)
    z = rng.standard_normal((2, 4, 6, 6))
    w = LossWeights(1, 20, 0.3, 0.7)

    def f(t):
        return total_loss(T.softmax_channels(t), lab, phi, w).total

    Z = Tensor(z, requires_grad=True)
    with Tape() as tape:
        loss = f(Z)
    tape.backward(loss)
    num = numeric_grad(lambda: f(Tensor(z)).item(), z)
    assert rel_err(num, Z.grad) < 1e-6
