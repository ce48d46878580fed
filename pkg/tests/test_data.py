import numpy as np
import pytest

from cobranch.data import (
    EmbeddingFormatError,
    ImbalanceProfile,
    Sample,
    feature_std,
    gen_synthetic,
    load_embeddings,
    make_class_means,
    make_longtail_counts,
    sample_from_means,
    save_embeddings,
    split_known_novel,
)
from oracles import nearest_mean_accuracy


def exp_profile(rho, n_max):
    return ImbalanceProfile("exponential", rho, n_max)


class TestLongtailCounts:
    def test_exponential_closed_form(self):
        counts = make_longtail_counts(5, exp_profile(16, 16))
        assert counts.tolist() == [16, 8, 4, 2, 1]

    def test_balanced_when_rho_one(self):
        counts = make_longtail_counts(2, exp_profile(1, 50))
        assert counts.tolist() == [50, 50]

    def test_cifar100lt_scale_total(self):
        # C=100, rho=100, n_max=500 totals ~10.8K before the labeled split
        counts = make_longtail_counts(100, exp_profile(100, 500))
        assert 10700 <= counts.sum() <= 11000
        assert counts[0] == 500 and counts[-1] == 5

    def test_pareto_endpoints(self):
        counts = make_longtail_counts(10, ImbalanceProfile("pareto", 20, 100))
        assert counts[0] == 100
        assert counts[-1] == 5

    @pytest.mark.parametrize("kind", ["exponential", "pareto"])
    def test_non_increasing_and_ratio(self, kind):
        rng = np.random.default_rng(7)
        for _ in range(25):
            C = int(rng.integers(2, 40))
            rho = float(rng.uniform(1, 200))
            n_max = int(rng.integers(int(np.ceil(rho)), 2000))
            counts = make_longtail_counts(C, ImbalanceProfile(kind, rho, n_max))
            assert np.all(np.diff(counts) <= 0)
            assert counts[-1] >= 1
            tail = counts[-1]
            ratio = counts[0] / tail
            assert rho * (1 - 2 / tail) <= ratio <= rho * (1 + 2 / tail)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            make_longtail_counts(1, exp_profile(2, 10))
        with pytest.raises(ValueError):
            ImbalanceProfile("exponential", 0.5, 10)
        with pytest.raises(ValueError):
            ImbalanceProfile("exponential", 20, 10)
        with pytest.raises(ValueError):
            ImbalanceProfile("zipf", 2, 10)


def toy_pool(counts, d=4, seed=0):
    return gen_synthetic(len(counts), d, np.asarray(counts), 8.0, 0.5, seed)


class TestSplitKnownNovel:
    def test_count_arithmetic(self):
        pool = toy_pool([10, 10])
        split = split_known_novel(pool, num_known=1, labeled_ratio=0.5, seed=0)
        assert len(split.labeled) == 5
        assert len(split.unlabeled) == 15

    def test_fully_supervised_degenerate(self):
        pool = toy_pool([6, 6, 6])
        split = split_known_novel(pool, num_known=3, labeled_ratio=1.0, seed=1)
        assert split.unlabeled == []
        assert len(split.labeled) == 18

    def test_conservation_and_no_labeled_novels(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            counts = rng.integers(3, 30, size=6)
            pool = toy_pool(counts.tolist(), seed=trial)
            split = split_known_novel(pool, num_known=4, labeled_ratio=0.5, seed=trial)
            assert len(split.labeled) + len(split.unlabeled) == counts.sum()
            assert all(s.label < 4 for s in split.labeled)
            assert int(split.true_counts.sum()) == counts.sum()

    def test_remap_recorded_and_consistent(self):
        pool = toy_pool([12, 9, 6, 3])
        split = split_known_novel(pool, num_known=2, labeled_ratio=0.5, seed=9)
        assert sorted(split.class_remap.keys()) == [0, 1, 2, 3]
        assert sorted(split.class_remap.values()) == [0, 1, 2, 3]
        # hidden labels of unlabeled known-class samples follow the remap
        by_id = {s.id: s.label for s in pool}
        for s, hidden in zip(split.unlabeled, split.unlabeled_true_labels):
            assert split.class_remap[by_id[s.id]] == hidden

    def test_deterministic_per_seed(self):
        pool = toy_pool([10, 8, 5])
        a = split_known_novel(pool, 2, 0.5, seed=5)
        b = split_known_novel(pool, 2, 0.5, seed=5)
        c = split_known_novel(pool, 2, 0.5, seed=6)
        assert [s.id for s in a.labeled] == [s.id for s in b.labeled]
        assert a.class_remap == b.class_remap
        assert ([s.id for s in a.labeled] != [s.id for s in c.labeled]
                or a.class_remap != c.class_remap)

    def test_rejects_bad_ratio_and_known_count(self):
        pool = toy_pool([5, 5])
        with pytest.raises(ValueError):
            split_known_novel(pool, 1, 0.0, seed=0)
        with pytest.raises(ValueError):
            split_known_novel(pool, 1, 1.5, seed=0)
        with pytest.raises(ValueError):
            split_known_novel(pool, 3, 0.5, seed=0)


class TestGenSynthetic:
    def test_well_separated_nearest_mean(self):
        pool = gen_synthetic(3, 6, np.array([100, 10, 1]), 10.0, 1.0, seed=2)
        assert len(pool) == 111
        X = np.stack([s.features for s in pool])
        y = np.array([s.label for s in pool])
        assert nearest_mean_accuracy(X, y) > 0.99

    def test_zero_noise_collapses_to_means(self):
        pool = gen_synthetic(3, 5, np.array([4, 4, 4]), 5.0, 0.0, seed=3)
        for c in range(3):
            rows = np.stack([s.features for s in pool if s.label == c])
            assert np.all(rows == rows[0])

    def test_seed_repeat_bit_identical(self):
        a = gen_synthetic(4, 7, np.array([9, 7, 5, 3]), 6.0, 1.0, seed=11)
        b = gen_synthetic(4, 7, np.array([9, 7, 5, 3]), 6.0, 1.0, seed=11)
        assert all(np.array_equal(x.features, y.features) for x, y in zip(a, b))
        assert [s.label for s in a] == [s.label for s in b]

    def test_separation_honored(self):
        means = make_class_means(5, 4, 3.5, seed=1)
        d = np.linalg.norm(means[:, None] - means[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() == pytest.approx(3.5)

    def test_test_pool_disjoint_from_train_stream(self):
        means = make_class_means(3, 4, 5.0, seed=4)
        train = sample_from_means(means, np.array([5, 5, 5]), 1.0, seed=4)
        test = sample_from_means(means, np.array([5, 5, 5]), 1.0, seed=4, stream=7)
        assert not np.allclose(train[0].features, test[0].features)

    def test_rejects_low_dim(self):
        with pytest.raises(ValueError):
            gen_synthetic(2, 1, np.array([3, 3]), 5.0, 1.0, seed=0)


class TestEmbeddingFiles:
    def test_three_row_file(self, tmp_path):
        path = tmp_path / "pool.csv"
        path.write_text(
            "id,label,f0,f1,f2,f3\n"
            "0,1,0.5,1.5,-2.0,3.25\n"
            "1,-1,0.0,0.0,1.0,2.0\n"
            "2,0,9.0,8.0,7.0,6.0\n"
        )
        pool = load_embeddings(str(path))
        assert len(pool) == 3
        assert pool[0].label == 1
        assert pool[1].label is None
        assert pool[2].features.tolist() == [9.0, 8.0, 7.0, 6.0]

    def test_round_trip_exact(self, tmp_path):
        pool = toy_pool([6, 4], d=5, seed=8)
        pool[2] = Sample(id=pool[2].id, features=pool[2].features, label=None)
        path = tmp_path / "rt.csv"
        save_embeddings(pool, str(path))
        loaded = load_embeddings(str(path))
        for a, b in zip(pool, loaded):
            assert a.id == b.id and a.label == b.label
            assert np.abs(a.features - b.features).max() < 1e-6

    def test_dimension_mismatch_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,label,f0,f1\n0,0,1.0,2.0\n1,0,1.0\n")
        with pytest.raises(EmbeddingFormatError, match=":3"):
            load_embeddings(str(path))

    def test_malformed_value_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,label,f0,f1\n0,0,1.0,oops\n")
        with pytest.raises(EmbeddingFormatError, match=":2"):
            load_embeddings(str(path))

    def test_unknown_label_index_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,label,f0,f1\n0,-4,1.0,2.0\n")
        with pytest.raises(EmbeddingFormatError, match="label index"):
            load_embeddings(str(path))

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,label,x0,x1\n0,0,1.0,2.0\n")
        with pytest.raises(EmbeddingFormatError):
            load_embeddings(str(path))


def test_feature_std_positive():
    pool = toy_pool([5, 5])
    assert feature_std(pool) > 0


def test_split_validate_catches_count_mismatch():
    pool = toy_pool([4, 4])
    split = split_known_novel(pool, 1, 0.5, seed=0)
    split.true_counts = np.array([1, 1])
    with pytest.raises(ValueError):
        split.validate()
