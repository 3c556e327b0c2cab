import numpy as np
import pytest

from xir.data import (
    EmptyDatasetError,
    InteractionStore,
    compute_popularity,
    load_interactions,
    load_split,
    load_vocab,
    popularity_from_probs,
    save_interactions,
    save_vocab,
    split_per_user,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadInteractions:
    def test_first_appearance_mapping(self, tmp_path):
        p = write(tmp_path, "t.tsv", "a\tx\na\ty\nb\tx\n")
        store = load_interactions(p)
        assert store.num_users == 2 and store.num_items == 2
        assert len(store) == 3
        assert store.user_tokens == ["a", "b"]
        assert store.item_tokens == ["x", "y"]

    def test_empty_file_raises(self, tmp_path):
        p = write(tmp_path, "t.tsv", "")
        with pytest.raises(EmptyDatasetError):
            load_interactions(p)

    def test_malformed_lines_counted(self, tmp_path):
        lines = [f"u{i}\ti{i}" for i in range(9)]
        lines.insert(4, "broken-line-no-tab")
        p = write(tmp_path, "t.tsv", "\n".join(lines) + "\n")
        store = load_interactions(p)
        assert len(store) == 9
        assert store.skipped_lines == 1

    def test_missing_file_is_io_error(self, tmp_path):
        with pytest.raises(OSError):
            load_interactions(tmp_path / "nope.tsv")

    def test_comma_and_extra_columns(self, tmp_path):
        p = write(tmp_path, "t.csv", "a,x,5,extra\nb,y,1\n")
        store = load_interactions(p)
        assert len(store) == 2

    def test_row_filter(self, tmp_path):
        p = write(tmp_path, "t.csv", "a,x,5\nb,y,1\nc,z,4\n")
        store = load_interactions(p, row_filter=lambda cols: int(cols[2]) >= 4)
        assert len(store) == 2
        assert store.skipped_lines == 0

    def test_reload_reproduces_mapping(self, tmp_path):
        p = write(tmp_path, "t.tsv", "b\ty\na\tx\nb\tz\n")
        s1 = load_interactions(p)
        s2 = load_interactions(p)
        assert s1.user_tokens == s2.user_tokens
        assert s1.item_tokens == s2.item_tokens
        np.testing.assert_array_equal(s1.users, s2.users)
        np.testing.assert_array_equal(s1.items, s2.items)

    def test_configurable_columns(self, tmp_path):
        p = write(tmp_path, "t.tsv", "5\tu1\ti1\n4\tu2\ti2\n")
        store = load_interactions(p, user_col=1, item_col=2)
        assert store.user_tokens == ["u1", "u2"]


class TestStoreRoundTrip:
    def test_save_and_reload(self, tmp_path):
        p = write(tmp_path, "t.tsv", "a\tx\na\ty\nb\tx\n")
        store = load_interactions(p)
        q = tmp_path / "out.tsv"
        save_interactions(store, q)
        again = load_interactions(q)
        np.testing.assert_array_equal(store.users, again.users)
        np.testing.assert_array_equal(store.items, again.items)

    def test_vocab_round_trip(self, tmp_path):
        toks = ["b", "a", "zz"]
        save_vocab(toks, tmp_path / "v.tsv")
        assert load_vocab(tmp_path / "v.tsv") == toks

    def test_load_split_shares_vocab(self, tmp_path):
        tr = write(tmp_path, "tr.tsv", "a\tx\nb\ty\n")
        te = write(tmp_path, "te.tsv", "a\tz\nc\tx\n")
        train, test = load_split(tr, te)
        assert train.num_users == test.num_users == 3
        assert train.num_items == test.num_items == 3
        # train defines indices first, test-only tokens extend at the end
        assert train.item_tokens == ["x", "y", "z"]
        assert test.items_of(0).tolist() == [2]


class TestSplitPerUser:
    def _store(self, counts, seed=0):
        rng = np.random.default_rng(seed)
        users = np.repeat(np.arange(len(counts)), counts)
        items = rng.integers(0, 50, size=users.size)
        return InteractionStore(users, items, len(counts), 50)

    def test_five_items_gives_four_train(self):
        store = self._store([5])
        train, test = split_per_user(store, 0.8, seed=1)
        assert len(train) == 4 and len(test) == 1

    def test_single_item_goes_to_train(self):
        store = self._store([1])
        train, test = split_per_user(store, 0.8, seed=1)
        assert len(train) == 1 and len(test) == 0

    def test_same_seed_same_split(self):
        store = self._store([7, 3, 12, 1, 9], seed=3)
        a = split_per_user(store, 0.8, seed=42)
        b = split_per_user(store, 0.8, seed=42)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.items, y.items)

    def test_partition_property(self):
        # per user, train + test is the original multiset and sizes follow floor
        rng = np.random.default_rng(9)
        for trial in range(20):
            counts = rng.integers(1, 15, size=rng.integers(1, 8))
            store = self._store(counts.tolist(), seed=trial)
            ratio = float(rng.uniform(0.05, 0.95))
            train, test = split_per_user(store, ratio, seed=trial)
            assert len(train) + len(test) == len(store)
            for u in store.user_index:
                orig = sorted(store.items_of(u).tolist())
                got = sorted(train.items_of(u).tolist() + test.items_of(u).tolist())
                assert orig == got
                n = len(orig)
                expect_train = min(n, max(1, int(np.floor(ratio * n + 1e-9))))
                assert train.items_of(u).size == expect_train

    def test_bad_ratio(self):
        store = self._store([3])
        for ratio in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ValueError):
                split_per_user(store, ratio, seed=0)


class TestPopularity:
    def test_plain_frequencies(self):
        store = InteractionStore(np.array([0, 0, 1, 2]), np.array([0, 0, 1, 2]), 3, 3)
        pop = compute_popularity(store, epsilon=0.0)
        np.testing.assert_allclose(pop.prob, [0.5, 0.25, 0.25])

    def test_single_item(self):
        store = InteractionStore(np.zeros(5, int), np.zeros(5, int), 1, 1)
        pop = compute_popularity(store, epsilon=0.0)
        np.testing.assert_allclose(pop.prob, [1.0])

    def test_smoothing(self):
        store = InteractionStore(np.array([0, 0]), np.array([1, 1]), 1, 2)
        pop = compute_popularity(store, epsilon=1.0)
        np.testing.assert_allclose(pop.prob, [0.25, 0.75])

    def test_distribution_invariants(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            n_items = int(rng.integers(2, 40))
            items = rng.integers(0, n_items, size=rng.integers(1, 200))
            store = InteractionStore(np.zeros(items.size, int), items, 1, n_items)
            pop = compute_popularity(store, epsilon=float(rng.uniform(0.1, 2.0)))
            assert abs(pop.prob.sum() - 1.0) < 1e-9
            assert (pop.prob > 0).all()
            np.testing.assert_allclose(pop.log_prob, np.log(pop.prob), atol=1e-12)

    def test_from_probs_rejects_zeros(self):
        with pytest.raises(ValueError):
            popularity_from_probs(np.array([0.5, 0.0, 0.5]))
