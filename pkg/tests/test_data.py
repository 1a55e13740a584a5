import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbank.classifier import ModelConfig, apply_update, init_optimizer, init_params, predict, supervised_grad
from fedbank.data import (
    DataLoadError,
    Dataset,
    PartitionError,
    PartitionSpec,
    dirichlet_partition,
    generate_gaussian_mixture,
    largest_remainder_counts,
    load_csv,
)
from fedbank.numerics import RngStream


class TestGaussianMixture:
    def test_deterministic(self):
        a = generate_gaussian_mixture(3, 4, [10, 20, 30], 2.0, RngStream(1))
        b = generate_gaussian_mixture(3, 4, [10, 20, 30], 2.0, RngStream(1))
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            generate_gaussian_mixture(2, 3, [0, 5], 2.0, RngStream(0))

    def test_count_length_mismatch(self):
        with pytest.raises(ValueError):
            generate_gaussian_mixture(3, 3, [5, 5], 2.0, RngStream(0))

    def test_all_classes_present(self):
        ds = generate_gaussian_mixture(4, 5, [3, 4, 5, 6], 1.0, RngStream(2))
        assert sorted(np.unique(ds.labels)) == [0, 1, 2, 3]
        assert len(ds) == 18

    def test_centers_equidistant_from_origin(self):
        ds = generate_gaussian_mixture(3, 6, [2000, 2000, 2000], 5.0, RngStream(3))
        means = np.stack([ds.features[ds.labels == k].mean(axis=0) for k in range(3)])
        np.testing.assert_allclose(np.linalg.norm(means, axis=1), 5.0, atol=0.2)
        # pairwise distances equal for a regular arrangement
        d01 = np.linalg.norm(means[0] - means[1])
        d02 = np.linalg.norm(means[0] - means[2])
        d12 = np.linalg.norm(means[1] - means[2])
        np.testing.assert_allclose([d01, d02], d12, atol=0.3)

    def test_wide_separation_is_linearly_separable(self):
        # oracle: a convergent softmax fit must reach 100% training accuracy
        ds = generate_gaussian_mixture(2, 2, [10, 10], 10.0, RngStream(4))
        config = ModelConfig(input_dim=2, num_classes=2, l2_penalty=0.0)
        params = init_params(config, RngStream(5))
        opt = init_optimizer(config.num_params, "adam", learning_rate=0.1)
        for _ in range(300):
            params, opt = apply_update(
                params, supervised_grad(params, ds.features, ds.labels), opt
            )
        assert np.all(predict(params, ds.features) == ds.labels)


class TestLoadCsv(object):
    def _write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_basic_labeled_file(self, tmp_path):
        path = self._write(tmp_path, "a,b,label\n1.0,2.0,0\n3.5,4.0,1\n5.0,6.5,2\n")
        ds = load_csv(path, label_column="label")
        assert ds.num_classes == 3
        assert len(ds) == 3
        assert ds.dim == 2
        np.testing.assert_array_equal(ds.labels, [0, 1, 2])
        np.testing.assert_array_equal(ds.ids, [0, 1, 2])

    def test_header_only(self, tmp_path):
        path = self._write(tmp_path, "a,b,label\n")
        with pytest.raises(DataLoadError, match="empty dataset"):
            load_csv(path, label_column="label")

    def test_unlabeled_load(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1.0,2.0\n3.0,4.0\n")
        ds = load_csv(path, label_column=None)
        assert ds.labels is None
        assert ds.dim == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataLoadError):
            load_csv(tmp_path / "nope.csv")

    def test_non_numeric_cell_names_location(self, tmp_path):
        path = self._write(tmp_path, "a,b,label\n1.0,oops,0\n")
        with pytest.raises(DataLoadError, match=r"row 1, column 'b'"):
            load_csv(path, label_column="label")

    def test_negative_label(self, tmp_path):
        path = self._write(tmp_path, "a,label\n1.0,-1\n")
        with pytest.raises(DataLoadError, match="negative label"):
            load_csv(path, label_column="label")

    def test_fractional_label(self, tmp_path):
        path = self._write(tmp_path, "a,label\n1.0,1.5\n")
        with pytest.raises(DataLoadError, match="not an integer"):
            load_csv(path, label_column="label")

    def test_missing_label_column(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1.0,2.0\n")
        with pytest.raises(DataLoadError, match="label column"):
            load_csv(path, label_column="y")


@given(
    st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=2, max_size=10),
    st.integers(min_value=0, max_value=500),
)
@settings(max_examples=100)
def test_largest_remainder_conserves_total(raw, total):
    p = np.asarray(raw) / np.sum(raw)
    counts = largest_remainder_counts(p, total)
    assert counts.sum() == total
    assert np.all(counts >= 0)


def big_pool(seed=0):
    return generate_gaussian_mixture(3, 4, [900, 600, 450], 2.0, RngStream(seed))


class TestDirichletPartition:
    def spec(self, **kw):
        base = dict(
            num_clients=10,
            gamma=1.5,
            proportion_bounds=(0.05, 0.5),
            server_per_class=5,
            val_fraction=0.1,
            test_fraction=0.2,
        )
        base.update(kw)
        return PartitionSpec(**base)

    def test_proportions_within_bounds(self):
        full = big_pool()
        fed = dirichlet_partition(full, self.spec(), RngStream(1))
        # realized allocation proportions per class stay inside the bounds
        counts = np.zeros((10, 3))
        for c, shard in enumerate(fed.clients):
            counts[c] = np.bincount(fed.client_labels_oracle(c), minlength=3)
        per_class_totals = counts.sum(axis=0)
        realized = counts / per_class_totals
        assert np.all(realized >= 0.05 - 0.02)  # integer rounding slack
        assert np.all(realized <= 0.5 + 0.02)

    def test_high_gamma_limit_is_uniform(self):
        full = big_pool()
        fed = dirichlet_partition(
            full, self.spec(gamma=1e6, proportion_bounds=(0.0, 1.0)), RngStream(2)
        )
        counts = np.zeros((10, 3))
        for c in range(10):
            counts[c] = np.bincount(fed.client_labels_oracle(c), minlength=3)
        realized = counts / counts.sum(axis=0)
        np.testing.assert_allclose(realized, 0.1, atol=0.01)

    def test_conservation_and_disjointness(self):
        full = big_pool()
        fed = dirichlet_partition(full, self.spec(), RngStream(3))
        groups = (
            [fed.server_labeled.ids, fed.validation.ids, fed.test.ids]
            + [c.ids for c in fed.clients]
        )
        all_ids = np.concatenate(groups)
        assert len(all_ids) == len(full)
        assert len(np.unique(all_ids)) == len(full)
        assert set(all_ids.tolist()) == set(full.ids.tolist())

    def test_per_class_conservation(self):
        full = big_pool()
        fed = dirichlet_partition(full, self.spec(), RngStream(4))
        client_counts = np.zeros(3, dtype=int)
        for c in range(10):
            client_counts += np.bincount(fed.client_labels_oracle(c), minlength=3)
        pool_counts = (
            full.class_counts()
            - fed.server_labeled.class_counts()
            - fed.validation.class_counts()
            - fed.test.class_counts()
        )
        np.testing.assert_array_equal(client_counts, pool_counts)

    def test_true_priors_match_shards(self):
        full = big_pool()
        fed = dirichlet_partition(full, self.spec(), RngStream(5))
        np.testing.assert_allclose(fed.true_client_priors.sum(axis=1), 1.0, atol=1e-9)
        for c, shard in enumerate(fed.clients):
            labels = fed.client_labels_oracle(c)
            np.testing.assert_allclose(
                fed.true_client_priors[c],
                np.bincount(labels, minlength=3) / len(labels),
            )

    def test_server_balanced(self):
        fed = dirichlet_partition(big_pool(), self.spec(), RngStream(6))
        np.testing.assert_array_equal(fed.server_labeled.class_counts(), [5, 5, 5])

    def test_client_labels_withheld(self):
        fed = dirichlet_partition(big_pool(), self.spec(), RngStream(7))
        assert all(shard.labels is None for shard in fed.clients)
        assert fed.client_labels_oracle(0).shape == (len(fed.clients[0]),)

    def test_deterministic(self):
        full = big_pool()
        a = dirichlet_partition(full, self.spec(), RngStream(8))
        b = dirichlet_partition(full, self.spec(), RngStream(8))
        for sa, sb in zip(a.clients, b.clients):
            np.testing.assert_array_equal(sa.ids, sb.ids)
        np.testing.assert_array_equal(a.true_client_priors, b.true_client_priors)
        np.testing.assert_array_equal(a.server_labeled.ids, b.server_labeled.ids)

    def test_unsatisfiable_bounds_report_class(self):
        with pytest.raises(PartitionError, match="class 0"):
            dirichlet_partition(
                big_pool(),
                self.spec(
                    proportion_bounds=(0.099, 0.101), max_resample_attempts=5
                ),
                RngStream(9),
            )

    def test_unlabeled_input_rejected(self):
        with pytest.raises(ValueError):
            dirichlet_partition(
                big_pool().without_labels(), self.spec(), RngStream(10)
            )

    def test_manifest_round_trip(self):
        fed = dirichlet_partition(big_pool(), self.spec(), RngStream(11))
        doc = json.loads(fed.manifest_json())
        assert doc["clients"][0]["ids"] == fed.clients[0].ids.tolist()
        assert doc["true_client_priors"] == fed.true_client_priors.tolist()
        assert doc["server_ids"] == fed.server_labeled.ids.tolist()


def test_dataset_rejects_duplicate_ids():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), None, 2, ids=np.array([1, 1]))


def test_partition_spec_invariants():
    with pytest.raises(ValueError):
        PartitionSpec(num_clients=0)
    with pytest.raises(ValueError):
        PartitionSpec(num_clients=2, gamma=0.0)
    with pytest.raises(ValueError):
        PartitionSpec(num_clients=2, proportion_bounds=(0.6, 0.5))
    with pytest.raises(ValueError):
        PartitionSpec(num_clients=30, proportion_bounds=(0.05, 0.5))
