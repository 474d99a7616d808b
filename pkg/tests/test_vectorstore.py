import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from knnmt.errors import BadMagicError, DimensionMismatchError, InvalidHeaderError, TruncatedFileError, VocabularyError
from knnmt.vectorstore import (
    Datastore,
    ExactSearcher,
    IvfSearcher,
    build_datastore,
    build_ivf_index,
    exact_knn,
    ivf_search,
    load_datastore,
    load_index,
    make_searcher,
    save_datastore,
    save_index,
)

from conftest import random_datastore
from oracles import brute_knn


class TestDatastore:
    def test_rejects_non_finite_keys(self):
        keys = np.zeros((2, 3), dtype=np.float32)
        keys[1, 2] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            Datastore(keys, [1, 2])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Datastore(np.zeros((3, 2)), [1, 2])

    def test_is_read_only(self, rng):
        ds = random_datastore(rng, 5, 4)
        with pytest.raises(ValueError):
            ds.keys[0, 0] = 1.0

    def test_build_one_entry_per_target_token(self, small_model):
        ds = build_datastore([(["w1", "w2"], ["w3", "w4", "w5", "w6"])], small_model)
        assert len(ds) == 4
        assert ds.dim == small_model.repr_dim
        np.testing.assert_array_equal(ds.values, small_model.vocab.lookup(["w3", "w4", "w5", "w6"]))

    def test_identical_sentences_give_identical_keys(self, small_model):
        pair = (["w1", "w9", "w2"], ["w3", "w4", "w5", "w6"])
        ds = build_datastore([pair, pair], small_model)
        assert len(ds) == 8
        assert ds.keys[:4].tobytes() == ds.keys[4:].tobytes()

    def test_keys_are_teacher_forced_states(self, small_model):
        src, tgt = [5, 9, 12], [7, 8, 20]
        ds = build_datastore([(src, tgt)], small_model)
        enc = small_model.encode(src)
        for t in range(3):
            r, _ = small_model.step([enc], [np.array([1] + tgt[:t])])
            np.testing.assert_array_equal(ds.keys[t], r[0])

    def test_unknown_token_names_sentence(self, small_model):
        with pytest.raises(VocabularyError, match="sentence 1"):
            build_datastore([(["w1"], ["w2"]), (["w1"], ["nope"])], small_model)

    def test_empty_corpus_rejected(self, small_model):
        with pytest.raises(ValueError):
            build_datastore([], small_model)


class TestExactKnn:
    def test_self_query_is_first(self, rng):
        ds = random_datastore(rng, 20, 6)
        ns = exact_knn(ds, ds.keys[3], 4)
        assert ns.entries()[0] == (3, 0.0, int(ds.values[3]))

    def test_k_larger_than_n(self, rng):
        ds = random_datastore(rng, 4, 3)
        assert len(exact_knn(ds, rng.standard_normal(3), 10)) == 4

    def test_empty_datastore(self):
        ds = Datastore(np.zeros((0, 3), np.float32), np.zeros(0, np.uint32))
        assert len(exact_knn(ds, np.zeros(3), 5)) == 0

    def test_dimension_mismatch_names_both(self, rng):
        ds = random_datastore(rng, 4, 3)
        with pytest.raises(DimensionMismatchError, match="5.*3|3.*5"):
            exact_knn(ds, np.zeros(5), 2)

    def test_small_matches_oracle(self, rng):
        ds = random_datastore(rng, 5, 8)
        q = rng.standard_normal(8)
        ns = exact_knn(ds, q, 2)
        idx, d = brute_knn(ds.keys, q.astype(np.float32), 2)
        np.testing.assert_array_equal(ns.indices, idx)
        np.testing.assert_allclose(ns.distances, d, rtol=1e-5)

    def test_ties_broken_by_index(self):
        keys = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0], [3.0, 0]], np.float32)
        ns = exact_knn(Datastore(keys, [1, 2, 3, 4, 5]), np.zeros(2), 4)
        assert ns.indices.tolist() == [0, 1, 2, 3]

    def test_duplicate_keys_ordered_by_index(self, rng):
        base = rng.standard_normal((50, 4)).astype(np.float32)
        keys = np.concatenate([base, base, base])
        ds = Datastore(keys, np.arange(150))
        searcher = ExactSearcher(ds)
        idx, _ = searcher.search(base[7], 3)
        assert idx[0].tolist() == [7, 57, 107]

    def test_shortlist_path_matches_oracle(self, rng):
        # above the direct-scan limit the searcher shortlists with a matmul
        ds = random_datastore(rng, 5000, 16)
        q = rng.standard_normal((40, 16)).astype(np.float32)
        idx, dist = ExactSearcher(ds).search(q, 8)
        for r in range(40):
            ref, refd = brute_knn(ds.keys, q[r], 8)
            np.testing.assert_array_equal(idx[r], ref)
            np.testing.assert_allclose(dist[r], refd, rtol=1e-4)

    def test_near_ties_on_lattice(self):
        # integer lattice keys create many exact ties
        g = np.stack(np.meshgrid(np.arange(12), np.arange(12), np.arange(20)), -1).reshape(-1, 3)
        ds = Datastore(g.astype(np.float32), np.zeros(len(g)))
        q = np.array([5.5, 5.5, 9.5], np.float32)
        idx, _ = ExactSearcher(ds).search(q, 16)
        ref, _ = brute_knn(ds.keys, q, 16)
        np.testing.assert_array_equal(idx[0], ref)

    @given(
        n=st.integers(1, 40),
        dim=st.integers(1, 6),
        k=st.integers(1, 12),
        seed=st.integers(0, 2**31),
        grid=st.booleans(),
    )
    def test_ordering_invariant(self, n, dim, k, seed, grid):
        r = np.random.default_rng(seed)
        keys = r.integers(-2, 3, size=(n, dim)) if grid else r.standard_normal((n, dim))
        ds = Datastore(keys.astype(np.float32), r.integers(0, 5, n))
        q = r.integers(-2, 3, size=dim) if grid else r.standard_normal(dim)
        ns = exact_knn(ds, q, k)
        assert len(ns) == min(k, n)
        pairs = list(zip(ns.distances.tolist(), ns.indices.tolist()))
        assert pairs == sorted(pairs)
        ref, _ = brute_knn(ds.keys, q.astype(np.float32), k)
        assert ns.indices.tolist() == ref.tolist()


class TestIvf:
    def test_single_cluster(self, rng):
        ds = random_datastore(rng, 30, 4)
        index = build_ivf_index(ds, 1)
        assert index.cluster(0).tolist() == list(range(30))
        np.testing.assert_allclose(index.centroids[0], ds.keys.astype(np.float64).mean(0), atol=1e-6)

    def test_one_cluster_per_entry(self, rng):
        ds = random_datastore(rng, 12, 3)
        index = build_ivf_index(ds, 12)
        assert sorted(len(c) for c in index.lists) == [1] * 12

    def test_separated_blobs(self, rng):
        a = rng.normal(0, 0.1, (100, 5))
        b = rng.normal(50, 0.1, (100, 5))
        keys = np.concatenate([a, b])[rng.permutation(200)]
        ds = Datastore(keys, np.zeros(200))
        labels = build_ivf_index(ds, 2).assignments
        blob = keys[:, 0] > 25
        assert len(set(labels[blob])) == 1 and len(set(labels[~blob])) == 1
        assert set(labels[blob]) != set(labels[~blob])

    def test_partition(self, rng):
        ds = random_datastore(rng, 500, 6)
        index = build_ivf_index(ds, 20)
        allm = np.sort(np.concatenate(index.lists))
        np.testing.assert_array_equal(allm, np.arange(500))
        assert np.all(np.isfinite(index.centroids))

    def test_too_many_clusters(self, rng):
        ds = random_datastore(rng, 5, 2)
        with pytest.raises(ValueError):
            build_ivf_index(ds, 6)

    def test_deterministic(self, rng):
        ds = random_datastore(rng, 400, 5)
        a, b = build_ivf_index(ds, 10), build_ivf_index(ds, 10)
        np.testing.assert_array_equal(a.assignments, b.assignments)
        assert a.centroids.tobytes() == b.centroids.tobytes()

    def test_all_probes_equals_exact(self, rng):
        ds = random_datastore(rng, 300, 6)
        index = build_ivf_index(ds, 9)
        for _ in range(20):
            q = rng.standard_normal(6)
            a, b = ivf_search(index, ds, q, 8, nprobe=9), exact_knn(ds, q, 8)
            np.testing.assert_array_equal(a.indices, b.indices)

    def test_results_come_from_probed_clusters(self, rng):
        ds = random_datastore(rng, 400, 4)
        index = build_ivf_index(ds, 16)
        q = rng.standard_normal(4).astype(np.float32)
        probes = index.probe(q[None], 3)[0]
        allowed = set(np.concatenate([index.cluster(c) for c in probes]).tolist())
        ns = ivf_search(index, ds, q, 10, nprobe=3)
        assert set(ns.indices.tolist()) <= allowed

    def test_batched_searcher_matches_single(self, rng):
        ds = random_datastore(rng, 600, 5)
        index = build_ivf_index(ds, 12)
        q = rng.standard_normal((15, 5)).astype(np.float32)
        idx, _ = IvfSearcher(index, ds, 4).search(q, 6)
        for r in range(15):
            np.testing.assert_array_equal(idx[r], ivf_search(index, ds, q[r], 6, 4).indices)

    def test_short_rows_are_padded(self):
        ds = Datastore(np.array([[0.0], [1.0], [100.0], [101.0]], np.float32), [1, 2, 3, 4])
        index = build_ivf_index(ds, 2)
        idx, dist = IvfSearcher(index, ds, 1).search(np.zeros(1), 3)
        assert idx[0].tolist() == [0, 1, -1]
        assert np.isinf(dist[0, 2])

    def test_recall_on_clustered_data(self):
        # 20k entries with cluster structure; nprobe=8 of round(sqrt(N)) lists
        r = np.random.default_rng(5)
        centers = r.standard_normal((200, 16)) * 4
        keys = centers[r.integers(0, 200, 20000)] + r.standard_normal((20000, 16))
        ds = Datastore(keys, np.zeros(20000))
        searcher = make_searcher(ds, "ivf")
        q = keys[r.choice(20000, 200, replace=False)] + 0.3 * r.standard_normal((200, 16))
        got, _ = searcher.search(q.astype(np.float32), 8)
        ref, _ = ExactSearcher(ds).search(q.astype(np.float32), 8)
        recall = np.mean([len(set(a) & set(b)) / 8 for a, b in zip(got.tolist(), ref.tolist())])
        assert recall >= 0.9

    def test_make_searcher_backends(self, rng):
        small = random_datastore(rng, 100, 3)
        assert isinstance(make_searcher(small), ExactSearcher)
        assert isinstance(make_searcher(random_datastore(rng, 5000, 3)), IvfSearcher)
        with pytest.raises(ValueError, match="backend"):
            make_searcher(small, "faiss")


class TestPersistence:
    def test_round_trip(self, rng, tmp_path):
        ds = random_datastore(rng, 3, 5)
        save_datastore(ds, tmp_path / "ds.bin")
        assert load_datastore(tmp_path / "ds.bin").equals(ds)

    def test_header_layout(self, rng, tmp_path):
        ds = random_datastore(rng, 3, 5)
        save_datastore(ds, tmp_path / "ds.bin")
        raw = (tmp_path / "ds.bin").read_bytes()
        assert raw[:6] == b"KNNDS1"
        assert int.from_bytes(raw[6:10], "little") == 5
        assert int.from_bytes(raw[10:18], "little") == 3
        assert len(raw) == 18 + 3 * 5 * 4 + 3 * 4
        np.testing.assert_array_equal(np.frombuffer(raw[18:78], "<f4").reshape(3, 5), ds.keys)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTADS" + bytes(20))
        with pytest.raises(BadMagicError, match="bad magic"):
            load_datastore(tmp_path / "x.bin")

    def test_truncated_names_sizes(self, rng, tmp_path):
        ds = random_datastore(rng, 10, 4)
        save_datastore(ds, tmp_path / "ds.bin")
        raw = (tmp_path / "ds.bin").read_bytes()
        (tmp_path / "cut.bin").write_bytes(raw[:60])
        with pytest.raises(TruncatedFileError) as err:
            load_datastore(tmp_path / "cut.bin")
        assert err.value.expected_bytes == len(raw)
        assert err.value.actual_bytes == 60

    def test_zero_dim_header(self, tmp_path):
        (tmp_path / "z.bin").write_bytes(b"KNNDS1" + (0).to_bytes(4, "little") + (0).to_bytes(8, "little"))
        with pytest.raises(InvalidHeaderError):
            load_datastore(tmp_path / "z.bin")

    def test_index_round_trip(self, rng, tmp_path):
        ds = random_datastore(rng, 200, 4)
        index = build_ivf_index(ds, 7)
        save_index(index, tmp_path / "ix.bin")
        back = load_index(tmp_path / "ix.bin")
        np.testing.assert_array_equal(back.assignments, index.assignments)
        assert back.centroids.tobytes() == index.centroids.tobytes()

    @given(n=st.integers(0, 30), dim=st.integers(1, 8), seed=st.integers(0, 1000))
    def test_round_trip_property(self, tmp_path_factory, n, dim, seed):
        r = np.random.default_rng(seed)
        ds = Datastore(r.standard_normal((n, dim)).astype(np.float32), r.integers(0, 2**32, n, dtype=np.uint64))
        path = tmp_path_factory.mktemp("rt") / "ds.bin"
        save_datastore(ds, path)
        assert load_datastore(path).equals(ds)
