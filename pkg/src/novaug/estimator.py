"""Scikit-learn style front end.

``AugmentedEmbedder`` wraps the full training pipeline behind fit/transform
so the embedding learner drops into sklearn pipelines and model selection:
``fit(X, y)`` trains on labeled feature vectors, ``transform(X)`` maps
features to unit-norm embeddings whose cosine similarities encode class
equivalence.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .config import ExperimentConfig
from .data import Dataset
from .pipeline import (
    build_state,
    count_parameters,
    embed_dataset,
    pretrain_embedder,
    pretrain_generator,
    run_joint,
)


class AugmentedEmbedder(BaseEstimator, TransformerMixin):
    """Metric embedding learner with optional synthetic-class augmentation.

    Parameters mirror the experiment configuration; `method` selects the
    augmentation: "vanilla" (none), "ps" (proxy/embedding interpolation),
    "l2a_ec" (generated vectors of existing classes), "l2a_nc" (generated
    novel classes).
    """

    def __init__(self, method="l2a_nc", loss="proxy_anchor", embedding_dim=32,
                 trunk_hidden=(128,), novel_ratio=2.0, lambda_div=1.0,
                 epsilon=0.05, batch_size=32, pretrain_steps=1000,
                 generator_steps=500, joint_steps=1000, weight_decay=1e-4,
                 seed=0):
        self.method = method
        self.loss = loss
        self.embedding_dim = embedding_dim
        self.trunk_hidden = trunk_hidden
        self.novel_ratio = novel_ratio
        self.lambda_div = lambda_div
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.pretrain_steps = pretrain_steps
        self.generator_steps = generator_steps
        self.joint_steps = joint_steps
        self.weight_decay = weight_decay
        self.seed = seed

    def _config(self):
        return ExperimentConfig.from_values({
            "method": self.method,
            "seed": self.seed,
            "loss.kind": self.loss,
            "model.embedding_dim": self.embedding_dim,
            "model.trunk_hidden": tuple(self.trunk_hidden),
            "novel.ratio": self.novel_ratio,
            "lambda_div": self.lambda_div,
            "ot.epsilon": self.epsilon,
            "train.batch_size": self.batch_size,
            "train.pretrain_f_steps": self.pretrain_steps,
            "train.pretrain_g_steps": self.generator_steps,
            "train.joint_steps": self.joint_steps,
            "train.weight_decay": self.weight_decay,
        })

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to learn a metric")
        data = Dataset(X, encoded + 1)
        config = self._config()
        state = build_state(config, len(self.classes_), X.shape[1])
        pretrain_embedder(state, data)
        if state.generator is not None and config["train.pretrain_g_steps"] > 0:
            pretrain_generator(state, data)
        run_joint(state, data)
        self.state_ = state
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "state_"):
            raise NotFittedError("fit must run before transform")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        dummy = np.ones(X.shape[0], dtype=np.int64)
        return embed_dataset(self.state_, Dataset(X, dummy)).vectors.data

    def parameter_counts(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("fit must run before parameter_counts")
        return count_parameters(self.state_)
