"""Synthetic Gaussian-cluster datasets and a CSV feature-file loader.

Classes are unit-sphere centers kept apart by a minimum pairwise angle;
samples are center + isotropic noise in the raw input space and deliberately
NOT normalized, so the embedder has to learn the normalization-invariant
structure itself. Train and test splits are disjoint by class.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np


class SpecError(ValueError):
    """Dataset specification cannot be satisfied."""


class ParseError(ValueError):
    """Feature file violates the expected format."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class SyntheticSpec:
    total_classes: int
    train_classes: int
    samples_per_class: int
    input_dim: int
    cluster_spread: float = 0.15
    min_angle_deg: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.train_classes < self.total_classes):
            raise SpecError(
                "need 0 < train_classes < total_classes for a disjoint test split"
            )
        if self.samples_per_class < 1 or self.input_dim < 1:
            raise SpecError("samples_per_class and input_dim must be positive")
        if self.cluster_spread < 0:
            raise SpecError("cluster_spread must be nonnegative")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def class_labels(self):
        return np.unique(self.labels)

    def checksum(self):
        digest = hashlib.sha256()
        digest.update(self.features.astype("<f8").tobytes())
        digest.update(self.labels.astype("<i8").tobytes())
        return digest.hexdigest()[:16]


def _sample_centers(rng, count, dim, min_angle_deg, max_attempts=20000):
    max_cos = np.cos(np.radians(min_angle_deg))
    centers = []
    attempts = 0
    while len(centers) < count:
        attempts += 1
        if attempts > max_attempts:
            raise SpecError(
                f"could not place {count} centers with pairwise angle >= "
                f"{min_angle_deg} deg in {dim}-D; reduce the class count or angle"
            )
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(abs(v @ c) <= max_cos for c in centers):
            centers.append(v)
    return np.array(centers)


def make_synthetic(spec: SyntheticSpec):
    """Build (train, test) datasets with class-disjoint splits.

    Train classes are labeled 1..train_classes; test classes continue from
    train_classes + 1. Same spec and seed always produce identical data.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _sample_centers(
        rng, spec.total_classes, spec.input_dim, spec.min_angle_deg
    )

    def build(class_ids):
        feats, labels = [], []
        for cid in class_ids:
            noise = rng.standard_normal((spec.samples_per_class, spec.input_dim))
            feats.append(centers[cid - 1] + spec.cluster_spread * noise)
            labels.append(np.full(spec.samples_per_class, cid))
        return Dataset(np.concatenate(feats), np.concatenate(labels))

    train = build(range(1, spec.train_classes + 1))
    test = build(range(spec.train_classes + 1, spec.total_classes + 1))
    return train, test


def budget_pool_spec(spec: SyntheticSpec, class_counts, total_samples):
    """Spec for the shared pool that every fixed-budget subset slices from."""
    per_class = [total_samples // k for k in class_counts]
    return replace(spec, samples_per_class=max(per_class))


def fixed_budget_split(spec: SyntheticSpec, class_counts, total_samples):
    """Train sets with k classes and floor(total/k) samples per class each.

    All subsets slice one seeded pool, so sweeps across k are paired: the
    evaluation split produced by ``make_synthetic(budget_pool_spec(...))`` is
    shared by every subset.
    """
    for k in class_counts:
        if not (1 <= k <= spec.train_classes):
            raise SpecError(f"class count {k} exceeds train_classes={spec.train_classes}")
        if total_samples // k < 1:
            raise SpecError(f"budget {total_samples} gives no samples for k={k}")
    pool, _ = make_synthetic(budget_pool_spec(spec, class_counts, total_samples))
    subsets = []
    for k in class_counts:
        per_class = total_samples // k
        keep = np.zeros(pool.size, dtype=bool)
        for cid in range(1, k + 1):
            rows = np.flatnonzero(pool.labels == cid)[:per_class]
            keep[rows] = True
        subsets.append(Dataset(pool.features[keep], pool.labels[keep]))
    return subsets


def save_feature_file(dataset: Dataset, path):
    """Write `# dim=<D> classes=<C>` header plus `label, v1, ..., vD` rows."""
    classes = dataset.class_labels()
    with open(path, "w") as fh:
        fh.write(f"# dim={dataset.dim} classes={len(classes)}\n")
        for label, row in zip(dataset.labels, dataset.features):
            values = ",".join(format(v, ".17g") for v in row)
            fh.write(f"{label},{values}\n")


def load_feature_file(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# dim="):
        raise ParseError("missing `# dim=<D> classes=<C>` header", line=1)
    try:
        fields = dict(part.split("=") for part in lines[0][2:].split())
        dim = int(fields["dim"])
        declared_classes = int(fields["classes"])
    except (ValueError, KeyError) as exc:
        raise ParseError(f"malformed header: {exc}", line=1) from None

    features, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise ParseError(
                f"expected label plus {dim} values, got {len(parts)} fields",
                line=lineno,
            )
        try:
            labels.append(int(parts[0]))
            features.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    if not features:
        raise ParseError("no data rows")

    dataset = Dataset(np.array(features), np.array(labels))
    classes = dataset.class_labels()
    if classes[0] != 1 or not np.array_equal(classes, np.arange(1, len(classes) + 1)):
        raise ParseError("labels must be contiguous integers starting at 1")
    if len(classes) != declared_classes:
        raise ParseError(
            f"header declares {declared_classes} classes, file has {len(classes)}"
        )
    return dataset
