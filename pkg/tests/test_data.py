import numpy as np
import pytest

from novaug.data import (
    Dataset,
    ParseError,
    SpecError,
    SyntheticSpec,
    budget_pool_spec,
    fixed_budget_split,
    load_feature_file,
    make_synthetic,
    save_feature_file,
)


def spec(**kwargs):
    base = dict(total_classes=4, train_classes=2, samples_per_class=5,
                input_dim=8, cluster_spread=0.1, seed=7)
    base.update(kwargs)
    return SyntheticSpec(**base)


class TestMakeSynthetic:
    def test_class_disjoint_splits(self):
        train, test = make_synthetic(spec())
        assert set(train.class_labels()) == {1, 2}
        assert set(test.class_labels()) == {3, 4}
        assert not set(train.class_labels()) & set(test.class_labels())

    def test_zero_spread_collapses_to_centers(self):
        train, _ = make_synthetic(spec(cluster_spread=0.0))
        for cid in train.class_labels():
            rows = train.features[train.labels == cid]
            assert np.all(rows == rows[0])
        np.testing.assert_allclose(np.linalg.norm(train.features, axis=1), 1.0)

    def test_seed_determinism(self):
        a_train, a_test = make_synthetic(spec())
        b_train, b_test = make_synthetic(spec())
        assert a_train.checksum() == b_train.checksum()
        assert a_test.checksum() == b_test.checksum()
        c_train, _ = make_synthetic(spec(seed=8))
        assert a_train.checksum() != c_train.checksum()

    def test_nearest_centroid_separable_when_spread_small(self):
        s = spec(total_classes=6, train_classes=3, samples_per_class=30,
                 cluster_spread=0.05, min_angle_deg=30.0)
        train, _ = make_synthetic(s)
        centroids = np.array(
            [train.features[train.labels == c].mean(axis=0)
             for c in train.class_labels()]
        )
        predicted = train.class_labels()[
            np.argmin(
                ((train.features[:, None, :] - centroids[None]) ** 2).sum(axis=2),
                axis=1,
            )
        ]
        assert np.all(predicted == train.labels)

    def test_min_angle_respected(self):
        s = spec(total_classes=8, train_classes=4, min_angle_deg=40.0, input_dim=16)
        train, test = make_synthetic(replace_spread(s, 0.0))
        centers = np.concatenate(
            [train.features[train.labels == c][:1] for c in train.class_labels()]
            + [test.features[test.labels == c][:1] for c in test.class_labels()]
        )
        cos = centers @ centers.T - np.eye(len(centers))
        assert np.all(np.abs(cos) <= np.cos(np.radians(40.0)) + 1e-12)

    def test_impossible_spec_raises(self):
        with pytest.raises(SpecError):
            make_synthetic(spec(total_classes=40, train_classes=20, input_dim=2,
                                min_angle_deg=60.0))

    def test_invalid_split_sizes(self):
        with pytest.raises(SpecError):
            spec(train_classes=4)  # equal to total
        with pytest.raises(SpecError):
            spec(samples_per_class=0)


def replace_spread(s, value):
    from dataclasses import replace

    return replace(s, cluster_spread=value)


class TestFixedBudgetSplit:
    def test_per_class_arithmetic(self):
        s = spec(total_classes=64, train_classes=48, input_dim=32)
        subsets = fixed_budget_split(s, [12, 24, 48], 1200)
        sizes = [len(np.unique(sub.labels)) for sub in subsets]
        assert sizes == [12, 24, 48]
        for sub, k in zip(subsets, [12, 24, 48]):
            per_class = np.bincount(sub.labels)[1:]
            assert np.all(per_class[:k] == 1200 // k)

    def test_total_within_k_of_budget(self):
        s = spec(total_classes=64, train_classes=48, input_dim=32)
        counts = [5, 7, 48]
        for sub, k in zip(fixed_budget_split(s, counts, 1000), counts):
            assert 1000 - k < sub.size <= 1000

    def test_uses_every_class_at_maximum(self):
        s = spec(total_classes=16, train_classes=8, input_dim=16)
        (sub,) = fixed_budget_split(s, [8], 160)
        assert set(sub.class_labels()) == set(range(1, 9))

    def test_subsets_are_paired_through_one_pool(self):
        s = spec(total_classes=16, train_classes=8, input_dim=16)
        sub_a, sub_b = fixed_budget_split(s, [4, 8], 80)
        pool, _ = make_synthetic(budget_pool_spec(s, [4, 8], 80))
        for sub in (sub_a, sub_b):
            for cid in sub.class_labels():
                expected = pool.features[pool.labels == cid][: 80 // len(sub.class_labels())]
                np.testing.assert_array_equal(
                    sub.features[sub.labels == cid], expected
                )

    def test_class_count_exceeding_available_raises(self):
        s = spec(total_classes=16, train_classes=8, input_dim=16)
        with pytest.raises(SpecError):
            fixed_budget_split(s, [9], 90)


class TestFeatureFile:
    def test_round_trip_identical(self, tmp_path):
        train, _ = make_synthetic(spec())
        path = tmp_path / "train.csv"
        save_feature_file(train, path)
        loaded = load_feature_file(path)
        np.testing.assert_array_equal(loaded.features, train.features)
        np.testing.assert_array_equal(loaded.labels, train.labels)
        assert loaded.checksum() == train.checksum()

    def test_short_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("# dim=3 classes=1\n1,0.5,0.5\n")
        with pytest.raises(ParseError, match="line 2"):
            load_feature_file(path)

    def test_empty_file_is_schema_error(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ParseError):
            load_feature_file(path)
        path.write_text("# dim=2 classes=0\n")
        with pytest.raises(ParseError, match="no data rows"):
            load_feature_file(path)

    def test_non_contiguous_labels_rejected(self, tmp_path):
        path = tmp_path / "gap.csv"
        path.write_text("# dim=2 classes=2\n1,0.0,1.0\n3,1.0,0.0\n")
        with pytest.raises(ParseError, match="contiguous"):
            load_feature_file(path)

    def test_non_numeric_value_names_line(self, tmp_path):
        path = tmp_path / "nan.csv"
        path.write_text("# dim=2 classes=1\n1,0.0,oops\n")
        with pytest.raises(ParseError, match="line 2"):
            load_feature_file(path)
