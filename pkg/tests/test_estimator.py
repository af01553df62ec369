import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.neighbors import KNeighborsClassifier
from sklearn.pipeline import make_pipeline

from novaug.data import SyntheticSpec, make_synthetic
from novaug.estimator import AugmentedEmbedder


def small_problem(seed=0):
    train, test = make_synthetic(SyntheticSpec(
        total_classes=8, train_classes=4, samples_per_class=15,
        input_dim=12, cluster_spread=0.08, seed=seed,
    ))
    return train.features, train.labels, test.features, test.labels


def fast_estimator(**kwargs):
    defaults = dict(method="vanilla", embedding_dim=8, trunk_hidden=(16,),
                    batch_size=12, pretrain_steps=60, generator_steps=30,
                    joint_steps=30, seed=0)
    defaults.update(kwargs)
    return AugmentedEmbedder(**defaults)


def test_fit_transform_shapes_and_unit_norm():
    X, y, X_test, _ = small_problem()
    emb = fast_estimator().fit(X, y)
    Z = emb.transform(X_test)
    assert Z.shape == (len(X_test), 8)
    np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-9)


def test_get_params_round_trip_and_clone():
    est = fast_estimator(method="l2a_nc", novel_ratio=1.0)
    params = est.get_params()
    assert params["method"] == "l2a_nc"
    cloned = clone(est)
    assert cloned.get_params() == params
    est.set_params(lambda_div=0.5)
    assert est.lambda_div == 0.5


def test_transform_before_fit_raises():
    with pytest.raises(NotFittedError):
        fast_estimator().transform(np.zeros((2, 12)))


def test_labels_may_be_arbitrary_values():
    X, y, _, _ = small_problem()
    relabeled = np.array(["a", "b", "c", "d"])[y - 1]
    emb = fast_estimator().fit(X, relabeled)
    assert list(emb.classes_) == ["a", "b", "c", "d"]


def test_feature_count_mismatch_rejected():
    X, y, _, _ = small_problem()
    emb = fast_estimator().fit(X, y)
    with pytest.raises(ValueError):
        emb.transform(np.zeros((3, 5)))


def test_single_class_rejected():
    X = np.random.default_rng(0).standard_normal((10, 4))
    with pytest.raises(ValueError):
        fast_estimator().fit(X, np.ones(10))


def test_composes_in_sklearn_pipeline():
    X, y, X_test, y_test = small_problem()
    pipe = make_pipeline(fast_estimator(pretrain_steps=150, joint_steps=80),
                         KNeighborsClassifier(n_neighbors=1, metric="cosine"))
    pipe.fit(X, y)
    acc = pipe.score(X, y)
    assert acc >= 0.95


def test_novel_class_method_trains():
    X, y, _, _ = small_problem()
    emb = fast_estimator(method="l2a_nc", novel_ratio=1.0, lambda_div=1.0).fit(X, y)
    counts = emb.parameter_counts()
    assert counts["generator"] > 0 and counts["proxies_novel"] == 4 * 8


def test_seed_reproducibility():
    X, y, X_test, _ = small_problem()
    a = fast_estimator(seed=3).fit(X, y).transform(X_test)
    b = fast_estimator(seed=3).fit(X, y).transform(X_test)
    np.testing.assert_array_equal(a, b)
