"""K-way N-shot evaluation on novel classes with cosine nearest-prototype."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset, DataError
from .model import ModelState, extract_features


@dataclass
class Episode:
    classes: np.ndarray  # (K,) class ids in the novel split
    support: np.ndarray  # (K, N) image indices
    queries: np.ndarray  # (K, Q) image indices
    episode_seed: object = None


@dataclass
class EvalReport:
    n_episodes: int
    mean_accuracy: float
    ci95: float
    per_episode_accuracies: np.ndarray
    K: int = 5
    N: int = 1
    Q: int = 15

    def summary(self):
        return {"K": self.K, "N": self.N, "Q": self.Q, "n_episodes": self.n_episodes,
                "mean": self.mean_accuracy, "ci95": self.ci95}


def mean_ci95(accs):
    """Mean and 1.96 * std / sqrt(n) (population std; 0 for one episode)."""
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size == 0:
        raise ValueError("no episodes")
    return float(accs.mean()), float(1.96 * accs.std() / np.sqrt(accs.size))


def episode_rng(seed, index):
    return np.random.default_rng([seed, index])


def sample_episode(novel: Dataset, K, N, Q, rng, episode_seed=None) -> Episode:
    if novel.n_classes < K:
        raise DataError(f"novel split has {novel.n_classes} classes, episode needs K={K}")
    counts = novel.class_counts()
    short = [novel.class_names[c] for c in range(novel.n_classes) if counts[c] < N + Q]
    if short:
        raise DataError(f"class {short[0]} has fewer than N+Q={N + Q} images")
    classes = np.sort(rng.choice(novel.n_classes, size=K, replace=False))
    support = np.empty((K, N), dtype=np.int64)
    queries = np.empty((K, Q), dtype=np.int64)
    for i, c in enumerate(classes):
        pool = np.flatnonzero(novel.labels == c)
        pick = rng.choice(pool, size=N + Q, replace=False)
        support[i], queries[i] = pick[:N], pick[N:]
    return Episode(classes, support, queries, episode_seed)


def compute_prototypes(support_features):
    """(K, N, D) support features -> (K, D) class means."""
    return np.asarray(support_features, dtype=np.float64).mean(axis=1)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > 0, v / np.where(n > 0, n, 1.0), 0.0)


def classify_query(query_feature, prototypes):
    """Softmax over cosine similarities to each prototype.

    Accepts one query (D,) or a batch (Q, D); returns (K,) or (Q, K).
    """
    q = np.asarray(query_feature, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if np.any(np.linalg.norm(q, axis=1) == 0):
        raise ValueError("all-zero query feature: cosine similarity undefined")
    s = _unit(q) @ _unit(prototypes).T
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def run_episode(features, episode: Episode, check=None):
    """Accuracy of one episode given precomputed features (n_images, D)."""
    K, N = episode.support.shape
    protos = compute_prototypes(features[episode.support])
    qf = features[episode.queries.reshape(-1)]
    truth = np.repeat(np.arange(K), episode.queries.shape[1])
    probs = classify_query(qf, protos)
    if check is not None:
        check(probs)
    return float(np.mean(np.argmax(probs, axis=1) == truth))


def _threads():
    try:
        return max(1, int(os.environ.get("CFSL_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_features(features, novel: Dataset, K=5, N=1, Q=15, n_episodes=600, seed=0,
                      check=None, threads=None) -> EvalReport:
    """Episodic evaluation over precomputed novel features.

    Episode i draws from its own generator seeded by (seed, i), so results
    do not depend on evaluation order or thread count.
    """
    if len(novel) == 0:
        raise DataError("novel split is empty; nothing to evaluate")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    features = np.asarray(features, dtype=np.float64)

    def one(i):
        ep = sample_episode(novel, K, N, Q, episode_rng(seed, i), (seed, i))
        return run_episode(features, ep, check)

    threads = threads or _threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(one, range(n_episodes)))
    else:
        accs = [one(i) for i in range(n_episodes)]
    accs = np.array(accs)
    mean, ci = mean_ci95(accs)
    return EvalReport(n_episodes, mean, ci, accs, K, N, Q)


def evaluate(novel: Dataset, model: ModelState, K=5, N=1, Q=15, n_episodes=600, seed=0,
             feature_transform=None, check=None) -> EvalReport:
    if len(novel) == 0:
        raise DataError("novel split is empty; nothing to evaluate")
    feats = extract_features(model, novel.images)
    if feature_transform is not None:
        feats = feature_transform(feats)
    return evaluate_features(feats, novel, K, N, Q, n_episodes, seed, check)
