"""Proxy-based metric losses over unions of real and synthetic embeddings.

Losses are computed from the cosine-similarity matrix between unit-norm
embedding rows and proxies normalized on use; gradients flow to both sides.
Labels are 1-based: real classes occupy 1..C, novel classes C+1..C+C_novel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, as_tensor, concat_rows, l2_normalize, logsumexp, softplus

LOSS_KINDS = ("proxy_anchor", "proxy_nca", "norm_softmax")

# additive mask: exp(-_MASK_BIG) underflows to exactly zero inside logsumexp
_MASK_BIG = 1e30


class LabelRangeError(ValueError):
    """A batch label has no proxy in the bank."""


@dataclass
class LossParams:
    kind: str = "proxy_anchor"
    alpha: float = 32.0  # proxy-anchor scaling
    delta: float = 0.1  # proxy-anchor margin
    temperature: float = 1.0  # proxy-nca / norm-softmax

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class EmbeddingBatch:
    """Unit-norm embedding rows with 1-based integer labels."""

    vectors: Tensor
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.vectors = as_tensor(self.vectors)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.data.ndim != 2:
            raise ValueError("embedding batch must be 2-D")
        if self.labels.shape != (self.vectors.data.shape[0],):
            raise ValueError(
                f"label count {self.labels.shape} does not match "
                f"{self.vectors.data.shape[0]} rows"
            )
        if self.labels.size and self.labels.min() < 1:
            raise ValueError("labels are 1-based; got a label below 1")

    @property
    def size(self):
        return self.vectors.data.shape[0]

    @property
    def dim(self):
        return self.vectors.data.shape[1]


class ProxyBank:
    """Learnable proxies: one row per real class, one per novel class.

    Stored unnormalized; callers normalize on use so gradients on the raw
    parameters stay well-defined.
    """

    def __init__(self, real: Tensor, novel: Tensor | None = None):
        self.real = real
        self.novel = novel
        if novel is not None and novel.data.shape[1] != real.data.shape[1]:
            raise ValueError("real and novel proxies must share the embedding dim")

    @classmethod
    def initialize(cls, num_real, num_novel, dim, rng):
        def sphere(n):
            v = rng.standard_normal((n, dim))
            return Tensor(v / np.linalg.norm(v, axis=1, keepdims=True),
                          requires_grad=True)

        return cls(sphere(num_real), sphere(num_novel) if num_novel > 0 else None)

    @property
    def num_real(self):
        return self.real.data.shape[0]

    @property
    def num_novel(self):
        return 0 if self.novel is None else self.novel.data.shape[0]

    @property
    def dim(self):
        return self.real.data.shape[1]

    def all(self):
        """Stacked proxy tensor and its 1-based class labels (real then novel)."""
        labels = np.arange(1, self.num_real + self.num_novel + 1, dtype=np.int64)
        if self.novel is None:
            return self.real, labels
        return concat_rows([self.real, self.novel]), labels

    def real_only(self):
        return self.real, np.arange(1, self.num_real + 1, dtype=np.int64)

    def novel_only(self):
        if self.novel is None:
            raise ValueError("bank has no novel proxies")
        labels = np.arange(self.num_real + 1,
                           self.num_real + self.num_novel + 1, dtype=np.int64)
        return self.novel, labels

    def parameters(self):
        return [self.real] if self.novel is None else [self.real, self.novel]


def union_batch(real: EmbeddingBatch, synthetic: EmbeddingBatch | None,
                allow_overlap=False) -> EmbeddingBatch:
    """Concatenate real rows first, then synthetic; label ranges must be disjoint
    unless overlap is explicitly allowed (existing-class augmentation)."""
    if synthetic is None or synthetic.size == 0:
        return real
    if synthetic.dim != real.dim:
        raise ValueError(
            f"embedding dims differ: real {real.dim}, synthetic {synthetic.dim}"
        )
    if not allow_overlap:
        shared = np.intersect1d(real.labels, synthetic.labels)
        if shared.size:
            raise ValueError(f"label ranges overlap on classes {shared.tolist()}")
    return EmbeddingBatch(
        concat_rows([real.vectors, synthetic.vectors]),
        np.concatenate([real.labels, synthetic.labels]),
    )


def _resolve_proxies(proxies):
    if isinstance(proxies, ProxyBank):
        return proxies.all()
    tensor, labels = proxies
    return as_tensor(tensor), np.asarray(labels, dtype=np.int64)


def j_met(batch: EmbeddingBatch, proxies, params: LossParams) -> Tensor:
    """Scalar metric loss of a batch against a proxy set.

    ``proxies`` is a ProxyBank or a (tensor, labels) pair; the latter lets
    callers splice in ephemeral proxies (interpolation-based synthesis).
    """
    if batch.size == 0:
        raise ValueError("empty embedding batch")
    proxy_t, proxy_labels = _resolve_proxies(proxies)
    if proxy_labels.size != len(set(proxy_labels.tolist())):
        raise ValueError("duplicate proxy labels")
    missing = np.setdiff1d(batch.labels, proxy_labels)
    if missing.size:
        raise LabelRangeError(f"batch labels without proxies: {missing.tolist()}")

    sims = batch.vectors @ l2_normalize(proxy_t).T  # (B, K)
    pos_mask = batch.labels[:, None] == proxy_labels[None, :]

    if params.kind == "proxy_anchor":
        return _proxy_anchor(sims, pos_mask, params)
    if params.kind == "proxy_nca":
        if proxy_labels.size < 2:
            raise ValueError("proxy-nca needs at least two proxies")
        return _proxy_nca(sims, pos_mask, params)
    return _norm_softmax(sims, pos_mask, params)


def _proxy_anchor(sims, pos_mask, params):
    # mean over proxies-with-positives of log(1 + sum_pos e^(-a(s-d)))
    # plus mean over all proxies of log(1 + sum_neg e^(a(s+d)))
    a, d = params.alpha, params.delta
    pos_block = np.where(pos_mask, 0.0, -_MASK_BIG)
    neg_block = np.where(pos_mask, -_MASK_BIG, 0.0)
    pos_lse = logsumexp(-a * (sims - d) + pos_block, axis=0)  # (K,)
    neg_lse = logsumexp(a * (sims + d) + neg_block, axis=0)
    num_pos_proxies = int(pos_mask.any(axis=0).sum())
    num_proxies = pos_mask.shape[1]
    # softplus(-BIG) is exactly 0 with zero slope, so empty columns drop out
    pos_term = softplus(pos_lse).sum() * (1.0 / max(num_pos_proxies, 1))
    neg_term = softplus(neg_lse).sum() * (1.0 / num_proxies)
    return pos_term + neg_term


def _proxy_nca(sims, pos_mask, params):
    # mean over samples of log(sum_{p != y} e^(s/T)) - s(x, p_y)/T
    inv_t = 1.0 / params.temperature
    own = (sims * pos_mask).sum(axis=1) * inv_t
    neg_lse = logsumexp(sims * inv_t + np.where(pos_mask, -_MASK_BIG, 0.0), axis=1)
    return (neg_lse - own).mean()


def _norm_softmax(sims, pos_mask, params):
    # cross-entropy over cosine logits / T
    inv_t = 1.0 / params.temperature
    own = (sims * pos_mask).sum(axis=1) * inv_t
    return (logsumexp(sims * inv_t, axis=1) - own).mean()
