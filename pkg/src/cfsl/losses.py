"""Training objectives and the permutation set for split-order prediction."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .model import (ModelState, classify_known, forward_features, predict_permutation,
                    predict_rotation)

MAX_SPLITS = 8


@dataclass(frozen=True)
class PermutationSet:
    perms: np.ndarray  # (M^s, n) int
    min_pairwise_hamming: int

    def __len__(self):
        return len(self.perms)

    @property
    def n(self):
        return self.perms.shape[1]


@dataclass
class LossWeights:
    alpha1: float = 0.5  # split
    alpha2: float = 0.1  # ER
    lambda1: float = 1.0
    lambda2: float = 0.5
    d_star: int = 5
    sparseness_weight: float = 0.1
    rotation_weight: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")
        if self.d_star < 1:
            raise ValueError(f"d_star must be >= 1, got {self.d_star}")


def hamming(p, q):
    return int(np.count_nonzero(np.asarray(p) != np.asarray(q)))


def min_pairwise_hamming(perms):
    perms = np.asarray(perms)
    if len(perms) < 2:
        return 0
    d = (perms[:, None, :] != perms[None, :, :]).sum(axis=2)
    d[np.diag_indices(len(perms))] = perms.shape[1] + 1
    return int(d.min())


def generate_permutation_set(n, m_s, seed=0) -> PermutationSet:
    """Greedy max-min Hamming selection over all n! orderings.

    The first permutation is drawn uniformly (seeded) from the lexicographic
    list; each next one maximizes its minimum Hamming distance to those
    already chosen, ties going to the lexicographically smallest.
    """
    if n > MAX_SPLITS:
        raise ValueError(f"n={n} too large for exhaustive enumeration (max {MAX_SPLITS})")
    if n < 1:
        raise ValueError("n must be >= 1")
    total = math.factorial(n)
    if not 1 <= m_s <= total:
        raise ValueError(f"m_s must be in [1, {total}] for n={n}, got {m_s}")
    cands = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(total))
    chosen = [first]
    mind = (cands != cands[first]).sum(axis=1)
    taken = np.zeros(total, dtype=bool)
    taken[first] = True
    while len(chosen) < m_s:
        score = np.where(taken, -1, mind)
        j = int(np.argmax(score))
        chosen.append(j)
        taken[j] = True
        mind = np.minimum(mind, (cands != cands[j]).sum(axis=1))
    perms = cands[chosen]
    return PermutationSet(perms, min_pairwise_hamming(perms))


# -- image transforms ----------------------------------------------------------

def split_tiles(x, h=2, v=2):
    """Cut images (B, H, W, C) into h*v tiles in row-major order -> (B*h*v, H/h, W/v, C)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    b, hh, ww, c = x.shape
    if hh % h or ww % v:
        raise ValueError(f"image {hh}x{ww} not divisible into {h}x{v} tiles")
    th, tw = hh // h, ww // v
    tiles = x.reshape(b, h, th, v, tw, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles).reshape(b * h * v, th, tw, c)


def rotate(x, k):
    """Rotate a single (H, W, C) image by 90*k degrees counter-clockwise."""
    if x.shape[0] != x.shape[1]:
        raise ValueError(f"rotation needs a square image, got {x.shape[:2]}")
    return np.rot90(x, k % 4, axes=(0, 1))


def rotate_batch(x, labels):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] != x.shape[2]:
        raise ValueError(f"rotation needs a square image, got {x.shape[1:3]}")
    return np.stack([rotate(img, int(k)) for img, k in zip(x, np.atleast_1d(labels))])


# -- individual terms ----------------------------------------------------------

def classification_loss(logits, y):
    return T.cross_entropy(logits, np.atleast_1d(y))


def split_loss(x, model: ModelState, perms: PermutationSet, perm_ids, grid=(2, 2)):
    """Cross-entropy of predicting which permutation reordered the tile features."""
    perm_ids = np.atleast_1d(np.asarray(perm_ids, dtype=np.intp))
    if np.any(perm_ids < 0) or np.any(perm_ids >= len(perms)):
        raise ValueError(f"permutation id out of range [0, {len(perms)})")
    h, v = grid
    if h * v != perms.n:
        raise ValueError(f"grid {h}x{v} does not match permutations of {perms.n}")
    tiles = split_tiles(x, h, v)
    b = len(tiles) // (h * v)
    if b != len(perm_ids):
        raise ValueError(f"{b} images but {len(perm_ids)} permutation ids")
    f = forward_features(model, tiles).feature
    logits = predict_permutation(model, T.reshape(f, (b, h * v, f.shape[1])),
                                 perms.perms[perm_ids])
    return T.cross_entropy(logits, perm_ids), logits


def rotation_loss(x, model: ModelState, rot_labels):
    rot_labels = np.atleast_1d(np.asarray(rot_labels, dtype=np.intp))
    if np.any(rot_labels < 0) or np.any(rot_labels > 3):
        raise ValueError("rotation label must be in 0..3")
    xr = rotate_batch(x, rot_labels)
    f = forward_features(model, xr).feature
    logits = predict_rotation(model, f)
    return T.cross_entropy(logits, rot_labels), logits


def topk_indices(v, k):
    """Indices of the k largest entries of v; ties go to the lower index."""
    v = np.asarray(v)
    return np.argsort(-v, kind="stable")[:k]


def er_mask(W, y, d_star):
    """Boolean (B, D) mask of T(W[:, y_b], d_star) for every label."""
    W = np.asarray(W)
    y = np.atleast_1d(y)
    d = W.shape[0]
    if d_star > d:
        raise ValueError(f"d_star={d_star} exceeds feature dim {d}")
    mask = np.zeros((len(y), d), dtype=bool)
    for i, c in enumerate(y):
        mask[i, topk_indices(W[:, c], d_star)] = True
    return mask


def er_loss(f, W, y, lambda1=1.0, lambda2=0.5, d_star=5):
    """Enlarging-reducing loss on raw pooled features, averaged over the batch.

    Channel selection comes from the effective classifier weights and is
    treated as a constant (no gradient through the top-k).
    """
    if not isinstance(f, T.Tensor):
        f = T.tensor(f)
    Wd = W.data if isinstance(W, T.Tensor) else np.asarray(W, dtype=np.float64)
    if f.ndim == 1:
        f = T.reshape(f, (1, -1))
    if f.shape[1] != Wd.shape[0]:
        raise ValueError(f"er_loss: shape mismatch {f.shape} vs {Wd.shape}")
    mask = er_mask(Wd, y, d_star)
    T.note_selection(mask)
    b = f.shape[0]
    enlarge = T.masked_sum(f, mask)
    reduce_ = T.masked_sum(f, ~mask)
    return T.scale(T.add(T.scale(enlarge, -lambda1), T.scale(reduce_, lambda2)), 1.0 / b)


def sparseness_loss(W):
    """Mean L1 norm of the classifier columns."""
    return T.scale(T.sum(T.abs(W)), 1.0 / W.shape[1])


# -- combined objective --------------------------------------------------------

TERMS = ("cls", "split", "rot", "er", "sparse")


@dataclass
class LossBreakdown:
    """Raw (unweighted) term values and the coefficients that combine them."""
    total: float
    raw: dict
    coef: dict
    cls_correct: int = 0
    split_correct: int = 0
    rot_correct: int = 0

    def weighted(self):
        return {k: self.coef[k] * self.raw[k] for k in TERMS}


def total_loss(x, y, model: ModelState, weights: LossWeights, perms: PermutationSet | None = None,
               rng=None, perm_ids=None, rot_labels=None, grid=(2, 2)):
    """Weighted sum of all enabled terms for a batch.

    One permutation id and one rotation label per image are drawn from
    ``rng`` unless given explicitly. Terms with zero weight are skipped.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    b = len(x)
    coef = {"cls": 1.0, "split": weights.alpha1, "rot": weights.rotation_weight,
            "er": weights.alpha2, "sparse": weights.sparseness_weight}
    raw = dict.fromkeys(TERMS, 0.0)

    feat = forward_features(model, x)
    logits = classify_known(model, feat)
    l_cls = classification_loss(logits, y)
    raw["cls"] = float(l_cls.data)
    total = l_cls
    out = LossBreakdown(0.0, raw, coef)
    out.cls_correct = int(np.sum(np.argmax(logits.data, axis=1) == y))

    W = None
    if coef["er"] > 0 or coef["sparse"] > 0:
        W = model.effective_W()
    if coef["split"] > 0:
        if perms is None:
            raise ValueError("split loss enabled but no permutation set given")
        if perm_ids is None:
            perm_ids = rng.integers(len(perms), size=b)
        l_split, s_logits = split_loss(x, model, perms, perm_ids, grid)
        raw["split"] = float(l_split.data)
        out.split_correct = int(np.sum(np.argmax(s_logits.data, axis=1) == perm_ids))
        total = T.add(total, T.scale(l_split, coef["split"]))
    if coef["rot"] > 0:
        if rot_labels is None:
            rot_labels = rng.integers(4, size=b)
        l_rot, r_logits = rotation_loss(x, model, rot_labels)
        raw["rot"] = float(l_rot.data)
        out.rot_correct = int(np.sum(np.argmax(r_logits.data, axis=1) == rot_labels))
        total = T.add(total, T.scale(l_rot, coef["rot"]))
    if coef["er"] > 0:
        l_er = er_loss(feat.feature, W, y, weights.lambda1, weights.lambda2, weights.d_star)
        raw["er"] = float(l_er.data)
        total = T.add(total, T.scale(l_er, coef["er"]))
    if coef["sparse"] > 0:
        l_sp = sparseness_loss(W)
        raw["sparse"] = float(l_sp.data)
        total = T.add(total, T.scale(l_sp, coef["sparse"]))
    out.total = float(total.data)
    return total, out
