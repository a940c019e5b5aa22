"""Classification metrics and embedding diagnostics."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist


def _pair(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth lengths differ")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, truth


def accuracy(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(pred == truth))


def macro_f1(pred, truth) -> float:
    """Mean per-class F1 over classes present in pred or truth."""
    pred, truth = _pair(pred, truth)
    scores = []
    for c in np.union1d(pred, truth):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def silhouette(embeddings, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points alone in their cluster score 0, matching the usual convention.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(labels):
        raise ValueError("embeddings must be (n, d) with one label per row")
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two sessions")
    if len(x) < 2:
        raise ValueError("silhouette needs at least two points")
    d = cdist(x, x)
    counts = np.bincount(inv)
    onehot = np.zeros((len(x), len(uniq)))
    onehot[np.arange(len(x)), inv] = 1.0
    sums = d @ onehot  # total distance from each point to each cluster
    own = counts[inv]
    a = sums[np.arange(len(x)), inv] / np.maximum(own - 1, 1)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(len(x)), inv] = np.inf
    b = mean_other.min(axis=1)
    s = np.where(own > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(np.mean(s))


def pca(x: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic PCA via SVD; returns (scores, explained variance of all components).

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    signs = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    var = s**2 / max(len(x) - 1, 1)
    k = min(n_components, vt.shape[0])
    return xc @ vt[:k].T, var


def project_embeddings(embeddings, target_dim: int = 2, pca_dim: int = 50, tsne: bool = False,
                       seed: int = 0) -> tuple[np.ndarray, float]:
    """PCA to min(pca_dim, d), then to ``target_dim``; optional t-SNE for the last step.

    Returns (points, share of total variance retained by the first PCA stage).
    """
    x = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    if len(x) < target_dim:
        raise ValueError(f"need at least {target_dim} points")
    if np.allclose(x.var(axis=0).sum(), 0.0):
        raise ValueError("degenerate input: zero variance")
    stage1, var = pca(x, min(pca_dim, x.shape[1]))
    retained = float(var[: stage1.shape[1]].sum() / var.sum())
    if tsne:
        from sklearn.manifold import TSNE

        perplexity = min(30.0, max(1.0, (len(x) - 1) / 3))
        points = TSNE(target_dim, perplexity=perplexity, init="pca", random_state=seed).fit_transform(stage1)
    else:
        points, _ = pca(stage1, target_dim)
    return points, retained
