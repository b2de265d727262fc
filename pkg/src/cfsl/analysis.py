"""Channel-level diagnostics: influence, top-k ablations, W/activation bins,
heatmaps and known/novel primitive overlap."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset, DataError, write_pnm
from .episodic import evaluate_features
from .losses import topk_indices
from .model import ModelState, extract_features, forward_features
from . import tensor as T


@dataclass
class AblationCurve:
    ks: list
    portions: list  # Acc_k / Acc_all; nan where undefined
    accuracies: list
    acc_all: float


@dataclass
class BinProfile:
    n_bins: int
    w_bins: np.ndarray
    f_bins: np.ndarray


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def influence(f_q, f_s, k=None):
    """Share of the cosine similarity contributed by channel k (all channels if None)."""
    prod = _unit(f_q) * _unit(f_s)
    s = prod.sum()
    if s == 0:
        raise ValueError("cosine similarity is zero; influence undefined")
    return prod / s if k is None else float(prod[k] / s)


def influence_profile(features, labels, n_pairs=1000, seed=0):
    """Mean per-channel influence over random same-class (query, support) pairs."""
    rng = np.random.default_rng(seed)
    features = np.asarray(features)
    labels = np.asarray(labels)
    acc = np.zeros(features.shape[1])
    used = 0
    classes = [c for c in np.unique(labels) if np.sum(labels == c) >= 2]
    if not classes:
        raise DataError("need a class with at least two images")
    for _ in range(n_pairs):
        c = classes[rng.integers(len(classes))]
        i, j = rng.choice(np.flatnonzero(labels == c), size=2, replace=False)
        try:
            acc += influence(features[i], features[j])
            used += 1
        except ValueError:
            continue
    return acc / max(used, 1)


def keep_topk_channels(features, k):
    """Zero all but the k most active channels of every feature row."""
    features = np.asarray(features, dtype=np.float64)
    if k > features.shape[-1]:
        raise ValueError(f"k={k} exceeds feature dim {features.shape[-1]}")
    order = np.argsort(-features, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(features.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return np.where(mask, features, 0.0)


def topk_feature_ablation(model: ModelState, novel: Dataset, ks, K=5, N=1, Q=15,
                          n_episodes=600, seed=0, features=None) -> AblationCurve:
    """Novel-class accuracy when every feature keeps only its top-k channels.

    Episodes are identical for every k (same seed). k = 0 leaves all-zero
    features, which the cosine classifier rejects; that point is NaN.
    """
    feats = extract_features(model, novel.images) if features is None else np.asarray(features)
    d = feats.shape[1]
    for k in ks:
        if k > d or k < 0:
            raise ValueError(f"k={k} outside [0, {d}]")
    acc_all = evaluate_features(feats, novel, K, N, Q, n_episodes, seed).mean_accuracy
    accs, portions = [], []
    for k in ks:
        if k == 0:
            accs.append(float("nan"))
            portions.append(float("nan"))
            continue
        try:
            a = evaluate_features(keep_topk_channels(feats, k), novel, K, N, Q, n_episodes,
                                  seed).mean_accuracy
        except ValueError:  # some feature became all-zero
            a = float("nan")
        accs.append(a)
        portions.append(a / acc_all if acc_all > 0 else float("nan"))
    return AblationCurve(list(ks), portions, accs, acc_all)


def mask_topk_weights(W, k):
    """Keep the k largest entries of every column of W, zero the rest."""
    W = np.asarray(W, dtype=np.float64)
    if k > W.shape[0] or k < 0:
        raise ValueError(f"k={k} outside [0, {W.shape[0]}]")
    out = np.zeros_like(W)
    for i in range(W.shape[1]):
        idx = topk_indices(W[:, i], k)
        out[idx, i] = W[idx, i]
    return out


def known_accuracy(features, labels, W):
    """Argmax accuracy of the cosine classifier with effective weights W."""
    fc = np.asarray(features) / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), T.L2_EPS)
    wn = np.linalg.norm(W, axis=0, keepdims=True)
    wc = np.asarray(W) / np.maximum(wn, T.L2_EPS)
    return float(np.mean(np.argmax(fc @ wc, axis=1) == np.asarray(labels)))


def topk_weight_ablation(model: ModelState, known: Dataset, ks, features=None) -> AblationCurve:
    if len(known) == 0:
        raise DataError("known evaluation set is empty")
    feats = extract_features(model, known.images) if features is None else features
    W = model.effective_W().data
    acc_all = known_accuracy(feats, known.labels, W)
    accs = [known_accuracy(feats, known.labels, mask_topk_weights(W, k)) for k in ks]
    portions = [a / acc_all if acc_all > 0 else float("nan") for a in accs]
    return AblationCurve(list(ks), portions, accs, acc_all)


def select_samples(images, labels, n=1000, seed=0):
    """Uniform draw of up to n images without replacement."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(labels), size=min(n, len(labels)), replace=False))
    return np.asarray(images)[idx], np.asarray(labels)[idx]


def bin_profile(W, features, labels, n_bins=32) -> BinProfile:
    """Sort channels by W[:, y] ascending, average W and f within contiguous bins.

    When D is not a multiple of n_bins the bins differ in size by at most one
    channel (leading bins take the extra channel).
    """
    W = np.asarray(W, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("empty sample set")
    d = W.shape[0]
    if n_bins > d:
        raise ValueError(f"n_bins={n_bins} exceeds feature dim {d}")
    groups = np.array_split(np.arange(d), n_bins)
    w_acc = np.zeros(n_bins)
    f_acc = np.zeros(n_bins)
    for f, y in zip(features, labels):
        col = W[:, y]
        order = np.argsort(col, kind="stable")
        ws, fs = col[order], f[order]
        w_acc += [ws[g].mean() for g in groups]
        f_acc += [fs[g].mean() for g in groups]
    w_acc /= len(labels)
    f_acc /= len(labels)
    return BinProfile(n_bins, _max_normalize(w_acc), _max_normalize(f_acc))


def _max_normalize(v):
    m = v.max()
    return v / m if m > 0 else v


def weight_activation_bins(model: ModelState, images, labels, n_bins=32) -> BinProfile:
    if len(labels) == 0:
        raise DataError("empty sample set")
    feats = extract_features(model, images)
    return bin_profile(model.effective_W().data, feats, labels, n_bins)


def heatmap_from_maps(spatial_map, feature, channel=None):
    """sum_j f_j * A_j (or the single map A_channel), min-max scaled to [0, 1]."""
    A = np.asarray(spatial_map, dtype=np.float64)
    if channel is None:
        H = A @ np.asarray(feature, dtype=np.float64)
    else:
        H = A[:, :, channel].copy()
    lo, hi = H.min(), H.max()
    if hi == lo:
        return np.zeros_like(H)
    return (H - lo) / (hi - lo)


def heatmap(model: ModelState, x, channel=None):
    with T.no_grad():
        out = forward_features(model, x)
    return heatmap_from_maps(out.spatial_map.data[0], out.feature.data[0], channel)


def upsample_nearest(grid, size):
    grid = np.asarray(grid)
    ry, rx = size[0] // grid.shape[0], size[1] // grid.shape[1]
    return np.repeat(np.repeat(grid, ry, axis=0), rx, axis=1)


def primitive_overlap(W, feature, class_index, k_f=15, k_w=5):
    """Channels both among the k_f most active for ``feature`` and the k_w most
    weighted for known class ``class_index``."""
    if isinstance(W, ModelState):
        W = W.effective_W().data
    W = np.asarray(W)
    top_f = set(topk_indices(feature, k_f).tolist())
    top_w = set(topk_indices(W[:, class_index], k_w).tolist())
    return sorted(top_f & top_w)


# -- writers -------------------------------------------------------------------

def write_curve_csv(path, curve: AblationCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "portion"])
        for k, p in zip(curve.ks, curve.portions):
            w.writerow([k, repr(float(p))])


def write_bins_csv(path, prof: BinProfile):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "w_mean", "f_mean"])
        for i in range(prof.n_bins):
            w.writerow([i, repr(float(prof.w_bins[i])), repr(float(prof.f_bins[i]))])


def write_heatmap(path_stem, grid, size=None):
    """<stem>.pgm (0-255 graymap, nearest-upsampled to ``size``) and <stem>.csv (raw grid)."""
    img = upsample_nearest(grid, size) if size is not None else np.asarray(grid)
    write_pnm(f"{path_stem}.pgm", img)
    with open(f"{path_stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(grid):
            w.writerow([repr(float(v)) for v in row])
