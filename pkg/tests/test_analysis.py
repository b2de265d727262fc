import csv

import numpy as np
import pytest

from cfsl import analysis as A
from cfsl.data import DataError, Dataset
from cfsl.episodic import evaluate_features
from cfsl.model import ModelState, extract_features, forward_features

from oracles import bins_oracle


def test_influence_analytic_cases():
    e = np.zeros(16)
    e[3] = 2.0
    assert A.influence(e, e, 3) == 1.0
    u = np.ones(16)
    assert np.all(A.influence(u, u) == 1 / 16)


def test_influence_sums_to_one(rng):
    for _ in range(50):
        a, b = rng.random(16), rng.random(16)
        assert abs(A.influence(a, b).sum() - 1) < 1e-12


def test_influence_zero_similarity_rejected():
    with pytest.raises(ValueError, match="zero"):
        A.influence(np.array([1.0, 0]), np.array([0, 1.0]))


def _novel(n=30, d=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(5), n // 5)
    feats = rng.random((n, d)) + 2 * np.eye(5, d)[labels]
    return Dataset(np.zeros((n, 4, 4, 1)), labels, list("abcde"), "novel"), feats


def test_feature_ablation_full_k_reproduces_report():
    ds, feats = _novel()
    curve = A.topk_feature_ablation(None, ds, [0, 2, 8], K=5, N=1, Q=3, n_episodes=20, features=feats)
    base = evaluate_features(feats, ds, 5, 1, 3, 20, 0)
    assert np.isnan(curve.portions[0])
    assert curve.portions[-1] == 1.0
    assert curve.accuracies[-1] == base.mean_accuracy


def test_feature_ablation_rejects_large_k():
    ds, feats = _novel()
    with pytest.raises(ValueError):
        A.topk_feature_ablation(None, ds, [9], features=feats)


def test_keep_topk_channels():
    f = np.array([[0.1, 0.5, 0.3, 0.5]])
    np.testing.assert_array_equal(A.keep_topk_channels(f, 2), [[0, 0.5, 0, 0.5]])


def test_mask_topk_weights():
    W = np.array([[1.0, 0.2], [3.0, 0.1], [2.0, 0.9]])
    np.testing.assert_array_equal(A.mask_topk_weights(W, 1), [[0, 0], [3, 0], [0, 0.9]])
    with pytest.raises(ValueError):
        A.mask_topk_weights(W, 4)


def test_weight_ablation_endpoints(tiny_splits):
    m = ModelState.init(n_classes=6, seed=0)
    curve = A.topk_weight_ablation(m, tiny_splits.known_heldout, [1, 64])
    assert curve.portions[-1] == 1.0


def test_bins_constant_column_and_sorted_feature(rng):
    W = np.full((64, 2), 0.7)
    prof = A.bin_profile(W, rng.random((3, 64)), [0, 1, 0], 32)
    assert np.all(prof.w_bins == 1.0)
    W = rng.random((64, 1))
    prof = A.bin_profile(W, W[:, 0][None], [0], 32)
    assert np.all(np.diff(prof.f_bins) >= 0)
    assert prof.w_bins.max() == 1.0 and prof.f_bins.max() == 1.0


@pytest.mark.parametrize("d,n_bins", [(64, 32), (70, 32), (10, 3)])
def test_bins_match_oracle(rng, d, n_bins):
    W, F = rng.random((d, 4)), rng.random((12, d))
    y = rng.integers(4, size=12)
    prof = A.bin_profile(W, F, y, n_bins)
    w_ref, f_ref = bins_oracle(W.tolist(), F.tolist(), y.tolist(), n_bins)
    np.testing.assert_allclose(prof.w_bins, w_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(prof.f_bins, f_ref, rtol=0, atol=1e-12)


def test_bins_empty_rejected():
    with pytest.raises(DataError):
        A.bin_profile(np.ones((4, 1)), np.zeros((0, 4)), [], 2)


def test_heatmap_weighted_sum_oracle(rng):
    m = ModelState.init(n_classes=3, seed=0, conv_init="he")
    x = rng.random((32, 32, 1))
    out = forward_features(m, x)
    A_map, f = out.spatial_map.data[0], out.feature.data[0]
    H = np.zeros(A_map.shape[:2])
    for j in range(len(f)):
        H += f[j] * A_map[:, :, j]
    ref = (H - H.min()) / (H.max() - H.min())
    np.testing.assert_allclose(A.heatmap(m, x), ref, atol=1e-12)


def test_heatmap_degenerate_cases():
    assert np.all(A.heatmap_from_maps(np.ones((2, 2, 3)), np.zeros(3)) == 0)
    maps = np.random.default_rng(0).random((2, 2, 1))
    h = A.heatmap_from_maps(maps, np.array([4.0]))
    np.testing.assert_allclose(h, (maps[..., 0] - maps.min()) / (maps.max() - maps.min()))
    np.testing.assert_array_equal(A.heatmap_from_maps(maps, np.array([1.0]), channel=0), h)


def test_upsample_nearest():
    g = np.array([[0.0, 1.0], [0.5, 0.25]])
    up = A.upsample_nearest(g, (4, 4))
    assert up.shape == (4, 4) and up[3, 3] == 0.25 and up[0, 1] == 0.0 and up[0, 2] == 1.0


def test_primitive_overlap(rng):
    W = np.zeros((20, 2))
    W[:5, 0] = 1
    f = np.zeros(20)
    f[:15] = 1
    assert A.primitive_overlap(W, f, 0) == [0, 1, 2, 3, 4]
    f = np.zeros(20)
    f[5:] = 1
    assert A.primitive_overlap(W, f, 0) == []
    W, f = rng.random((64, 3)), rng.random(64)
    ref = set(np.argsort(-f)[:15]) & set(np.argsort(-W[:, 2])[:5])
    assert A.primitive_overlap(W, f, 2) == sorted(ref)


def test_writers(tmp_path):
    A.write_curve_csv(tmp_path / "c.csv", A.AblationCurve([1, 2], [0.5, 1.0], [0.4, 0.8], 0.8))
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["k", "portion"] and rows[2] == ["2", "1.0"]
    A.write_bins_csv(tmp_path / "b.csv", A.BinProfile(2, np.array([0.5, 1.0]), np.array([1.0, 0.2])))
    assert list(csv.reader(open(tmp_path / "b.csv")))[0] == ["bin", "w_mean", "f_mean"]
    A.write_heatmap(tmp_path / "h", np.array([[0.0, 1.0], [0.5, 0.5]]), (4, 4))
    head = open(tmp_path / "h.pgm").read().split()
    assert head[:4] == ["P2", "4", "4", "255"]
    assert len(list(csv.reader(open(tmp_path / "h.csv")))) == 2
