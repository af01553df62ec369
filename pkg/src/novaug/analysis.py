"""Retrieval metrics and embedding-space diagnostics.

Everything here is read-only over numpy views of the learned quantities:
recall@k retrieval, cosine-similarity statistics between synthetic samples
and proxies, per-class Gaussian KL alignment, and a 2-D PCA dump.
"""

from __future__ import annotations

from dataclasses import dataclass
import warnings

import numpy as np

from .losses import EmbeddingBatch
from .tensor import Tensor


@dataclass
class GaussianClassModel:
    mean: np.ndarray
    var: np.ndarray  # diagonal, floored away from zero

    @classmethod
    def fit(cls, rows, var_floor=1e-6):
        if rows.shape[0] < 2:
            raise ValueError("need at least two samples to fit a class Gaussian")
        return cls(rows.mean(axis=0), np.maximum(rows.var(axis=0), var_floor))


def fit_class_models(vectors, labels, var_floor=1e-6):
    """One diagonal Gaussian per class; classes with < 2 samples are skipped
    with a warning since their variance is undefined."""
    models = {}
    for label in np.unique(labels):
        rows = vectors[labels == label]
        if rows.shape[0] < 2:
            warnings.warn(f"class {label} has {rows.shape[0]} sample(s); skipped")
            continue
        models[int(label)] = GaussianClassModel.fit(rows, var_floor)
    return models


def gaussian_kl(p: GaussianClassModel, q: GaussianClassModel):
    """KL(N(p) || N(q)) for diagonal Gaussians, in closed form."""
    ratio = p.var / q.var
    mahal = (p.mean - q.mean) ** 2 / q.var
    return 0.5 * float(np.sum(np.log(q.var) - np.log(p.var) + ratio + mahal - 1.0))


def kl_alignment(source_models, target_models):
    """Mean over source classes of the minimum KL to any target class."""
    if not source_models or not target_models:
        raise ValueError("both class model sets must be nonempty")
    minima = [
        min(gaussian_kl(src, tgt) for tgt in target_models.values())
        for src in source_models.values()
    ]
    return float(np.mean(minima))


def _as_array(vectors):
    return vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors)


def recall_at_k(batch: EmbeddingBatch, k_list):
    """Fraction of queries whose k nearest neighbors contain a same-class row.

    Cosine similarity on unit rows; each query is excluded from its own
    candidate set; ties break toward the lower row index.
    """
    vectors = _as_array(batch.vectors)
    labels = batch.labels
    n = vectors.shape[0]
    if n < 2:
        raise ValueError("recall@k needs at least two samples")
    for k in k_list:
        if not 1 <= k < n:
            raise ValueError(f"k={k} must be in [1, {n - 1}]")

    sims = vectors @ vectors.T
    np.fill_diagonal(sims, -np.inf)
    # stable sort on negated similarity: equal scores keep index order
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = labels[order] == labels[:, None]
    return {
        int(k): float(hits[:, :k].any(axis=1).mean()) for k in k_list
    }


def proxy_sample_similarity(batch: EmbeddingBatch, proxies, proxy_labels):
    """Cosine similarity of each synthetic row to its own class proxy.

    Returns per-class (mean, min) plus aggregate mean/min over all rows.
    """
    vectors = _as_array(batch.vectors)
    p = _as_array(proxies)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    proxy_labels = np.asarray(proxy_labels)
    index = {int(label): i for i, label in enumerate(proxy_labels)}
    missing = [l for l in np.unique(batch.labels) if int(l) not in index]
    if missing:
        raise ValueError(f"labels without proxies: {missing}")

    rows = np.array([vectors[i] @ p[index[int(l)]] for i, l in enumerate(batch.labels)])
    per_class = {
        int(label): {
            "mean": float(rows[batch.labels == label].mean()),
            "min": float(rows[batch.labels == label].min()),
        }
        for label in np.unique(batch.labels)
    }
    return {
        "mean": float(rows.mean()),
        "min": float(rows.min()),
        "per_class": per_class,
    }


def proxy_proxy_similarity(real_proxies, novel_proxies):
    """Statistics of the full real x novel cosine-similarity matrix."""
    p = _as_array(real_proxies)
    q = _as_array(novel_proxies)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("both proxy banks must be nonempty")
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    sims = p @ q.T
    return {"mean": float(sims.mean()), "max": float(sims.max())}


def pca_2d(batch: EmbeddingBatch):
    """Top-2 principal coordinates of the centered embeddings.

    Sign convention: each component's largest-magnitude loading is positive,
    making the output deterministic. Returns rows of (label, u, v).
    """
    vectors = _as_array(batch.vectors)
    if vectors.shape[0] < 3:
        raise ValueError("pca dump needs at least three samples")
    centered = vectors - vectors.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if singular.size < 2 or singular[1] <= 1e-12 * max(singular[0], 1.0):
        raise ValueError("input is rank-deficient; no 2-D structure to project")
    components = vt[:2]
    for i in range(2):
        pivot = np.argmax(np.abs(components[i]))
        if components[i][pivot] < 0:
            components[i] = -components[i]
    coords = centered @ components.T
    return [
        (int(label), float(u), float(v))
        for label, (u, v) in zip(batch.labels, coords)
    ]
