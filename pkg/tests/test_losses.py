import numpy as np
import pytest

from cfsl import tensor as T
from cfsl.losses import (LossWeights, classification_loss, er_loss, er_mask, generate_permutation_set,
                         rotate, rotate_batch, rotation_loss, sparseness_loss, split_loss, split_tiles,
                         topk_indices, total_loss)
from cfsl.model import ModelState
from cfsl.optim import NesterovSGD

from oracles import er_oracle, logsumexp_ce


def test_classification_uniform_and_monotone():
    assert abs(classification_loss(T.tensor(np.zeros((1, 6))), 2).item() - np.log(6)) < 1e-14
    vals = [classification_loss(T.tensor([[0.0, z, 0.0]]), 1).item() for z in (0, 5, 10, 40)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-15


def test_classification_matches_lse_oracle(rng):
    z = rng.standard_normal(5) * 3
    assert abs(classification_loss(T.tensor(z[None]), 3).item() - logsumexp_ce(z.tolist(), 3)) < 1e-12


def test_default_weights():
    w = LossWeights()
    assert (w.alpha1, w.alpha2, w.lambda1, w.lambda2, w.d_star, w.sparseness_weight) == \
        (0.5, 0.1, 1.0, 0.5, 5, 0.1)
    assert w.rotation_weight == 0.5


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha1=-0.1)
    with pytest.raises(ValueError):
        LossWeights(d_star=0)


# -- ER -------------------------------------------------------------------------

def test_er_forced_arithmetic():
    W = np.array([[4.0], [3.0], [2.0], [1.0]])
    assert er_loss(np.ones(4), W, 0, 1.0, 0.5, 2).item() == -1.0


def test_er_zero_lambdas(rng):
    assert er_loss(rng.random(8), rng.random((8, 2)), 1, 0.0, 0.0, 3).item() == 0.0


def test_er_matches_sort_oracle(rng):
    for _ in range(20):
        f, W = rng.random(16), rng.random((16, 4))
        y = int(rng.integers(4))
        ref = er_oracle(f.tolist(), W.tolist(), y, 1.0, 0.5, 5)
        assert abs(er_loss(f, W, y, 1.0, 0.5, 5).item() - ref) < 1e-12


def test_er_ties_go_to_lower_index():
    W = np.array([[1.0], [2.0], [2.0], [2.0]])
    assert topk_indices(W[:, 0], 2).tolist() == [1, 2]
    assert er_mask(W, [0], 2).tolist() == [[False, True, True, False]]


def test_er_gradient_is_constant_per_channel(rng):
    f = T.tensor(rng.random((3, 10)), requires_grad=True)
    W = rng.random((10, 4))
    y = np.array([0, 3, 3])
    er_loss(f, W, y, 1.0, 0.5, 4).backward()
    mask = er_mask(W, y, 4)
    np.testing.assert_array_equal(f.grad, np.where(mask, -1.0, 0.5) / 3)


def test_er_rejects_large_d_star(rng):
    with pytest.raises(ValueError):
        er_loss(rng.random(4), rng.random((4, 2)), 0, d_star=5)


# -- sparseness -------------------------------------------------------------------

def test_sparseness_cases(rng):
    assert sparseness_loss(T.tensor(np.zeros((5, 3)))).item() == 0.0
    assert sparseness_loss(T.tensor(np.eye(4))).item() == 1.0
    W = rng.random((8, 3))
    assert abs(sparseness_loss(T.tensor(W)).item() - W.sum() / 3) < 1e-12


# -- transforms -------------------------------------------------------------------

def test_split_tiles_row_major():
    x = np.arange(32 * 32, dtype=float).reshape(1, 32, 32, 1)
    tiles = split_tiles(x, 2, 2)
    assert tiles.shape == (4, 16, 16, 1)
    np.testing.assert_array_equal(tiles[1], x[0, :16, 16:])
    np.testing.assert_array_equal(tiles[2], x[0, 16:, :16])


def test_split_tiles_rejects_indivisible():
    with pytest.raises(ValueError):
        split_tiles(np.zeros((1, 15, 16, 1)))


def test_rotation_group(rng):
    x = rng.random((8, 8, 1))
    assert np.array_equal(rotate(x, 0), x)
    assert np.array_equal(rotate(rotate(x, 1), 1), rotate(x, 2))
    y = x
    for _ in range(4):
        y = rotate(y, 1)
    assert np.array_equal(y, x)
    # counter-clockwise: top-right corner moves to top-left
    z = np.zeros((4, 4, 1))
    z[0, 3] = 1
    assert rotate(z, 1)[0, 0, 0] == 1


def test_rotation_rejects_non_square():
    with pytest.raises(ValueError):
        rotate_batch(np.zeros((1, 8, 4, 1)), [1])


# -- self-supervised heads ---------------------------------------------------------

def _untrained_mean(loss_fn, n_labels, seeds=range(4)):
    # average over inits: a single random head sits on either side of chance
    rng = np.random.default_rng(0)
    x = rng.random((64, 32, 32, 1))
    vals = [loss_fn(x, ModelState.init(n_classes=3, seed=s), rng.integers(n_labels, size=64)).item()
            for s in seeds]
    return float(np.mean(vals))


def test_split_loss_chance_level_untrained():
    perms = generate_permutation_set(4, 24, 0)
    mean = _untrained_mean(lambda x, m, ids: split_loss(x, m, perms, ids)[0], 24)
    assert abs(mean / np.log(24) - 1) < 0.1


def test_rotation_loss_chance_level_untrained():
    mean = _untrained_mean(lambda x, m, r: rotation_loss(x, m, r)[0], 4)
    assert abs(mean / np.log(4) - 1) < 0.1


def test_split_loss_logits_shape(rng):
    m = ModelState.init(widths=(4, 8), n_classes=3, n_perms=24, seed=0)
    _, logits = split_loss(rng.random((5, 32, 32, 1)), m, generate_permutation_set(4, 24, 0),
                           rng.integers(24, size=5))
    assert logits.shape == (5, 24)


def test_split_loss_overfits_one_image():
    rng = np.random.default_rng(0)
    m = ModelState.init(widths=(4, 8), n_classes=2, n_splits=4, n_perms=6, seed=1, conv_init="he")
    perms = generate_permutation_set(4, 6, 0)
    identity = int(np.flatnonzero((perms.perms == np.arange(4)).all(axis=1))[0])
    x = rng.random((1, 32, 32, 1))
    opt = NesterovSGD(m.trainable(), 0.9)
    for _ in range(150):
        opt.zero_grad()
        loss, _ = split_loss(x, m, perms, [identity])
        loss.backward()
        opt.step(0.05)
    assert split_loss(x, m, perms, [identity])[0].item() < 1e-2


# -- combined ------------------------------------------------------------------------

def _batch(rng):
    return rng.random((4, 32, 32, 1)), np.array([0, 1, 2, 1])


def test_total_reduces_to_classification(rng):
    m = ModelState.init(widths=(4, 8), n_classes=3, seed=0)
    x, y = _batch(rng)
    w = LossWeights(alpha1=0, alpha2=0, sparseness_weight=0, rotation_weight=0)
    total, parts = total_loss(x, y, m, w)
    assert total.item() == parts.raw["cls"]
    assert parts.raw["split"] == parts.raw["er"] == 0.0


def test_breakdown_sums_to_total(rng):
    m = ModelState.init(widths=(4, 8), n_classes=3, n_perms=24, seed=0)
    perms = generate_permutation_set(4, 24, 0)
    x, y = _batch(rng)
    total, parts = total_loss(x, y, m, LossWeights(d_star=3), perms, np.random.default_rng(0))
    assert abs(sum(parts.weighted().values()) - total.item()) < 1e-12
    assert parts.total == total.item()
