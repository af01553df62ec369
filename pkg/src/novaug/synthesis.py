"""Synthetic embedding generation.

Two augmenters live here: a conditional generator that maps (class label,
noise) to a unit-norm embedding vector, used for both novel-class and
existing-class augmentation depending on its label universe, and
interpolation-based pair synthesis that blends two real classes' proxy and
embedding with one shared Beta-sampled coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ConditionalBatchNorm, LabelRangeError, Linear, Module
from .losses import EmbeddingBatch
from .tensor import DegenerateInput, Tensor, as_tensor, gather_rows, l2_normalize, relu

NOISE_DIM = 16


class NoiseSource:
    """Seeded stream of standard-normal latent vectors."""

    def __init__(self, rng, dim=NOISE_DIM):
        self.rng = rng
        self.dim = dim

    def sample(self, count):
        return Tensor(self.rng.standard_normal((count, self.dim)))


@dataclass
class PSParams:
    alpha: float = 2.0  # Beta(alpha, alpha) shape for the interpolation weight

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be in (0, inf)")


class ConditionalGenerator(Module):
    """Four linear layers with class-conditional batch norm between each pair.

    Class identity enters only through the batch-norm affine tables; the
    final output is l2-normalized. ``first_label``/``num_classes`` define the
    1-based label universe (novel classes C+1..C+C_novel, or real classes
    1..C for existing-class augmentation).
    """

    def __init__(self, num_classes, first_label, output_dim, rng,
                 noise_dim=NOISE_DIM, hidden_dim=None):
        super().__init__()
        if num_classes < 1:
            raise ValueError("generator needs at least one class")
        hidden = hidden_dim if hidden_dim else 4 * output_dim
        self.fc1 = Linear(noise_dim, hidden, rng, bias=False)
        self.cbn1 = ConditionalBatchNorm(num_classes, hidden)
        self.fc2 = Linear(hidden, hidden, rng, bias=False)
        self.cbn2 = ConditionalBatchNorm(num_classes, hidden)
        self.fc3 = Linear(hidden, hidden, rng, bias=False)
        self.cbn3 = ConditionalBatchNorm(num_classes, hidden)
        self.fc4 = Linear(hidden, output_dim, rng)
        self.num_classes = num_classes
        self.first_label = first_label
        self.noise_dim = noise_dim
        self.hidden_dim = hidden
        self.output_dim = output_dim

    def label_universe(self):
        return np.arange(self.first_label, self.first_label + self.num_classes)

    def class_index(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        idx = labels - self.first_label
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_classes):
            raise LabelRangeError(
                f"labels must lie in [{self.first_label}, "
                f"{self.first_label + self.num_classes - 1}]"
            )
        return idx

    def forward(self, labels, noise):
        idx = self.class_index(labels)
        h = as_tensor(noise)
        h = relu(self.cbn1(self.fc1(h), idx))
        h = relu(self.cbn2(self.fc2(h), idx))
        h = relu(self.cbn3(self.fc3(h), idx))
        return l2_normalize(self.fc4(h))


def generate(gen: ConditionalGenerator, labels, noise) -> EmbeddingBatch:
    """Synthesize one embedding row per (label, noise row)."""
    labels = np.asarray(labels, dtype=np.int64)
    return EmbeddingBatch(gen(labels, noise), labels)


def ps_synthesize(x_i, x_j, p_i, p_j, params: PSParams, rng, lam=None,
                  y_i=None, y_j=None):
    """Interpolate one (proxy, embedding) pair from two distinct classes.

    The same weight lam ~ Beta(alpha, alpha) blends both interpolations;
    results are renormalized to the unit sphere. A near-zero blend (antipodal
    inputs at lam ~ 0.5) raises DegenerateInput so callers can skip the pair.
    Passing the source labels enables the distinct-class check.
    """
    if y_i is not None and y_i == y_j:
        raise ValueError("pair synthesis requires two distinct classes")
    x_i, x_j, p_i, p_j = (as_tensor(t) for t in (x_i, x_j, p_i, p_j))
    if lam is None:
        lam = float(rng.beta(params.alpha, params.alpha))
    row = lambda t: t if t.data.ndim == 2 else Tensor(t.data.reshape(1, -1))

    def blend(a, b):
        mixed = lam * a + (1.0 - lam) * b
        return l2_normalize(row(mixed))

    # normalize proxies before blending so both interpolations live on the sphere
    p_tilde = blend(l2_normalize(row(p_i)), l2_normalize(row(p_j)))
    x_tilde = blend(row(x_i), row(x_j))
    return p_tilde, x_tilde


def ps_synthesize_batch(batch: EmbeddingBatch, proxies: Tensor, params: PSParams,
                        rng, max_pairs, first_new_label):
    """Pair up a real batch and interpolate synthetic classes for one step.

    Rows are shuffled and paired consecutively; same-class and degenerate
    pairs are skipped. Each surviving pair becomes a fresh class starting at
    ``first_new_label``. Returns (synthetic batch, proxy rows, labels), or
    None when no valid pair exists. Gradients flow back into the real
    embeddings and the real proxies.
    """
    n = batch.size
    if n < 2:
        return None
    order = rng.permutation(n)
    left, right, lams = [], [], []
    for k in range(0, n - 1, 2):
        i, j = order[k], order[k + 1]
        if batch.labels[i] == batch.labels[j]:
            continue
        lam = float(rng.beta(params.alpha, params.alpha))
        # skip pairs whose blend would collapse below the normalizer's floor
        xm = lam * batch.vectors.data[i] + (1.0 - lam) * batch.vectors.data[j]
        pn_i = proxies.data[batch.labels[i] - 1]
        pn_j = proxies.data[batch.labels[j] - 1]
        pn_i = pn_i / np.linalg.norm(pn_i)
        pn_j = pn_j / np.linalg.norm(pn_j)
        pm = lam * pn_i + (1.0 - lam) * pn_j
        if np.linalg.norm(xm) < 1e-9 or np.linalg.norm(pm) < 1e-9:
            continue
        left.append(i)
        right.append(j)
        lams.append(lam)
        if len(left) >= max_pairs:
            break
    if not left:
        return None

    lam_col = np.array(lams)[:, None]
    xi = gather_rows(batch.vectors, np.array(left))
    xj = gather_rows(batch.vectors, np.array(right))
    x_tilde = l2_normalize(lam_col * xi + (1.0 - lam_col) * xj)

    proxies_n = l2_normalize(proxies)
    pi = gather_rows(proxies_n, batch.labels[np.array(left)] - 1)
    pj = gather_rows(proxies_n, batch.labels[np.array(right)] - 1)
    p_tilde = l2_normalize(lam_col * pi + (1.0 - lam_col) * pj)

    labels = first_new_label + np.arange(len(left), dtype=np.int64)
    return EmbeddingBatch(x_tilde, labels), p_tilde, labels
