"""Synthetic data, partitioning, noise, and CSV round-trip tests."""

import numpy as np
import pytest

from metafl.datagen import (
    ClientDataset,
    PartitionConfig,
    inject_label_noise,
    label_distribution,
    load_csv,
    make_blobs,
    partition_dirichlet,
    save_csv,
)
from metafl.models import ModelSpec, TrainConfig, evaluate, init_params, train_local


def sorted_rows(data: ClientDataset) -> np.ndarray:
    rows = np.column_stack([data.features, data.labels.astype(np.float64)])
    return rows[np.lexsort(rows.T[::-1])]


class TestMakeBlobs:
    def test_label_balance(self):
        data = make_blobs(2, 3, 100, 0.5, 0)
        counts = np.bincount(data.labels)
        np.testing.assert_array_equal(counts, [50, 50])

    def test_balance_within_one(self):
        data = make_blobs(3, 2, 100, 0.5, 1)
        counts = np.bincount(data.labels)
        assert counts.max() - counts.min() <= 1

    def test_deterministic(self):
        a = make_blobs(3, 4, 50, 0.8, 42)
        b = make_blobs(3, 4, 50, 0.8, 42)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_tight_spread_is_linearly_separable(self):
        data = make_blobs(3, 4, 300, 0.01, 7)
        spec = ModelSpec(input_dim=4, hidden_dim=0, num_classes=3)
        params = train_local(
            spec, init_params(spec, 0), data,
            TrainConfig(learning_rate=0.5, epochs=10, seed=1),
        )
        assert evaluate(spec, params, data).val_accuracy >= 0.99

    def test_errors(self):
        with pytest.raises(ValueError, match="num_classes"):
            make_blobs(1, 2, 10, 0.5, 0)
        with pytest.raises(ValueError, match="per class"):
            make_blobs(5, 2, 3, 0.5, 0)


class TestPartitionDirichlet:
    def test_conserves_multiset(self):
        data = make_blobs(3, 2, 200, 0.8, 3)
        splits = partition_dirichlet(data, PartitionConfig(num_clients=5, seed=9))
        parts = [d for pair in splits for d in pair]
        merged = ClientDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )
        assert merged.n == data.n
        np.testing.assert_array_equal(sorted_rows(merged), sorted_rows(data))

    def test_sample_counts_add_up(self):
        data = make_blobs(2, 2, 150, 0.8, 4)
        splits = partition_dirichlet(data, PartitionConfig(num_clients=4, seed=2))
        assert sum(t.n + v.n for t, v in splits) == data.n

    def test_high_beta_is_nearly_iid(self):
        data = make_blobs(2, 2, 4000, 0.8, 11)
        global_share = label_distribution(data, 2)[1]
        cfg = PartitionConfig(num_clients=4, dirichlet_beta=1e6, seed=5)
        for train, val in partition_dirichlet(data, cfg):
            merged = ClientDataset(
                np.concatenate([train.features, val.features]),
                np.concatenate([train.labels, val.labels]),
            )
            share = label_distribution(merged, 2)[1]
            assert abs(share - global_share) <= 0.05

    def test_no_empty_splits_across_seeds(self):
        data = make_blobs(2, 2, 60, 0.8, 1)
        for seed in range(10):
            cfg = PartitionConfig(num_clients=5, dirichlet_beta=0.3, seed=seed)
            for train, val in partition_dirichlet(data, cfg):
                assert train.n >= 1 and val.n >= 1

    def test_infeasible(self):
        data = make_blobs(2, 2, 4, 0.5, 0)
        with pytest.raises(ValueError, match="infeasible"):
            partition_dirichlet(data, PartitionConfig(num_clients=5))

    def test_beta_controls_skew(self):
        # smaller beta concentrates labels: lower mean per-client entropy
        data = make_blobs(2, 2, 1000, 0.8, 2)

        def mean_entropy(beta, seed):
            cfg = PartitionConfig(num_clients=5, dirichlet_beta=beta, seed=seed)
            ents = []
            for train, val in partition_dirichlet(data, cfg):
                p = label_distribution(train, 2)
                nz = p[p > 0]
                ents.append(float(-(nz * np.log(nz)).sum()))
            return float(np.mean(ents))

        skewed = np.mean([mean_entropy(0.05, s) for s in range(20)])
        iid = np.mean([mean_entropy(100.0, s) for s in range(20)])
        assert skewed < iid

    def test_deterministic(self):
        data = make_blobs(3, 2, 120, 0.8, 6)
        cfg = PartitionConfig(num_clients=3, dirichlet_beta=0.5, seed=8)
        a = partition_dirichlet(data, cfg)
        b = partition_dirichlet(data, cfg)
        for (ta, va), (tb, vb) in zip(a, b):
            np.testing.assert_array_equal(ta.features, tb.features)
            np.testing.assert_array_equal(va.labels, vb.labels)


class TestInjectLabelNoise:
    def test_zero_rate_identity(self):
        data = make_blobs(2, 2, 30, 0.5, 0)
        out = inject_label_noise(data, 0.0, 1)
        np.testing.assert_array_equal(out.labels, data.labels)

    def test_exact_flip_count(self):
        data = make_blobs(2, 2, 10, 0.5, 0)
        out = inject_label_noise(data, 0.5, 3)
        assert int(np.sum(out.labels != data.labels)) == 5

    def test_flips_always_change_class(self):
        data = make_blobs(4, 2, 200, 0.5, 1)
        out = inject_label_noise(data, 0.9, 7, num_classes=4)
        changed = out.labels != data.labels
        assert int(changed.sum()) == 180
        assert np.all(out.labels[changed] != data.labels[changed])
        assert out.labels.max() < 4 and out.labels.min() >= 0

    def test_reproducible(self):
        data = make_blobs(3, 2, 50, 0.5, 2)
        a = inject_label_noise(data, 0.3, 11, num_classes=3)
        b = inject_label_noise(data, 0.3, 11, num_classes=3)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = inject_label_noise(data, 0.3, 12, num_classes=3)
        assert np.any(a.labels != c.labels)


class TestCsv:
    def test_small_file(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.5,2.0,0\n-0.25,3.5,1\n")
        data = load_csv(str(path), 2)
        np.testing.assert_array_equal(data.features, [[1.5, 2.0], [-0.25, 3.5]])
        np.testing.assert_array_equal(data.labels, [0, 1])

    def test_header_flag(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x0,x1,label\n1.0,2.0,1\n")
        data = load_csv(str(path), 2, has_header=True)
        assert data.n == 1

    def test_label_out_of_range_names_row(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.0,2.0,0\n1.0,2.0,2\n")
        with pytest.raises(ValueError, match="row 2"):
            load_csv(str(path), 2)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.0,2.0,0\n1.0,0\n")
        with pytest.raises(ValueError, match="row 2.*ragged"):
            load_csv(str(path), 2)

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.0,abc,0\n")
        with pytest.raises(ValueError, match="row 1.*non-numeric"):
            load_csv(str(path), 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValueError, match="missing file"):
            load_csv(str(tmp_path / "nope.csv"), 2)

    def test_round_trip(self, tmp_path):
        data = make_blobs(3, 4, 40, 0.9, 13)
        path = tmp_path / "rt.csv"
        save_csv(data, str(path))
        back = load_csv(str(path), 3)
        np.testing.assert_array_equal(back.features, data.features)
        np.testing.assert_array_equal(back.labels, data.labels)


class TestLabelDistribution:
    def test_balanced(self):
        data = ClientDataset([[0.0]] * 4, [0, 0, 1, 1])
        np.testing.assert_array_equal(label_distribution(data, 2), [0.5, 0.5])

    def test_single_class(self):
        data = ClientDataset([[0.0]] * 3, [1, 1, 1])
        np.testing.assert_array_equal(label_distribution(data, 3), [0.0, 1.0, 0.0])

    def test_counting(self):
        data = ClientDataset([[0.0]] * 4, [0, 0, 0, 1])
        np.testing.assert_array_equal(label_distribution(data, 2), [0.75, 0.25])


class TestClientDataset:
    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="nonempty"):
            ClientDataset(np.zeros((0, 2)), [])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            ClientDataset([[np.nan]], [0])

    def test_rejects_label_mismatch(self):
        with pytest.raises(ValueError, match="label count"):
            ClientDataset([[1.0], [2.0]], [0])
