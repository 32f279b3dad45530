import numpy as np
import pytest

from fgtr.hnsw import HNSWIndex, IndexError_, brute_force_search


def unit_vectors(n, dim, seed):
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((n, dim))
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


@pytest.fixture
def small_index():
    vecs = unit_vectors(200, 16, seed=11)
    index = HNSWIndex(dimension=16, seed=3)
    index.add_batch(vecs)
    return index, vecs


class TestConstruction:
    def test_len_tracks_inserts(self):
        index = HNSWIndex(dimension=4)
        assert len(index) == 0
        index.add(np.array([1.0, 0.0, 0.0, 0.0]))
        assert len(index) == 1

    def test_wrong_dimension_rejected(self):
        index = HNSWIndex(dimension=4)
        with pytest.raises(IndexError_):
            index.add(np.zeros(5))

    def test_deterministic_for_fixed_seed(self):
        vecs = unit_vectors(100, 8, seed=5)
        a = HNSWIndex(dimension=8, seed=9)
        b = HNSWIndex(dimension=8, seed=9)
        a.add_batch(vecs)
        b.add_batch(vecs)
        q = unit_vectors(1, 8, seed=6)[0]
        assert a.search(q, 10) == b.search(q, 10)


class TestSearch:
    def test_empty_index(self):
        assert HNSWIndex(dimension=4).search(np.zeros(4), 5) == []

    def test_wrong_query_dimension(self, small_index):
        index, _ = small_index
        with pytest.raises(IndexError_):
            index.search(np.zeros(3), 5)

    def test_self_match(self, small_index):
        index, vecs = small_index
        for i in (0, 57, 199):
            node, sim = index.search(vecs[i], 1)[0]
            assert sim == pytest.approx(1.0, abs=1e-6)
            assert np.allclose(index.vectors[node], vecs[i])

    def test_truncates_to_population(self):
        vecs = unit_vectors(3, 8, seed=2)
        index = HNSWIndex(dimension=8)
        index.add_batch(vecs)
        assert len(index.search(vecs[0], 10)) == 3

    def test_results_sorted_best_first(self, small_index):
        index, vecs = small_index
        hits = index.search(unit_vectors(1, 16, seed=8)[0], 10)
        sims = [s for _, s in hits]
        assert sims == sorted(sims, reverse=True)

    def test_matches_exact_scan_on_small_set(self, small_index):
        index, vecs = small_index
        queries = unit_vectors(25, 16, seed=21)
        agree = 0
        for q in queries:
            approx = index.search(q, 1, ef=128)[0][0]
            exact = brute_force_search(vecs, q, 1)[0][0]
            if approx == exact:
                agree += 1
        assert agree >= 24


class TestBruteForceOracle:
    def test_exact_ordering(self):
        vecs = np.eye(4)
        q = np.array([0.9, 0.1, 0.0, 0.0])
        hits = brute_force_search(vecs, q, 2)
        assert [i for i, _ in hits] == [0, 1]
        assert hits[0][1] == pytest.approx(0.9)

    def test_stable_ties(self):
        vecs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        hits = brute_force_search(vecs, np.array([1.0, 0.0]), 2)
        assert [i for i, _ in hits] == [0, 1]


class TestPersistence:
    def test_round_trip_preserves_results(self, small_index, tmp_path):
        index, vecs = small_index
        path = tmp_path / "idx.hnsw"
        index.save(path)
        loaded = HNSWIndex.load(path)
        q = unit_vectors(1, 16, seed=33)[0]
        assert loaded.search(q, 10) == index.search(q, 10)
        assert np.array_equal(loaded.vectors, index.vectors)

    def test_serialization_byte_stable(self, small_index, tmp_path):
        index, _ = small_index
        p1, p2 = tmp_path / "a.hnsw", tmp_path / "b.hnsw"
        index.save(p1)
        index.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_index_round_trip(self, tmp_path):
        index = HNSWIndex(dimension=8)
        path = tmp_path / "empty.hnsw"
        index.save(path)
        loaded = HNSWIndex.load(path)
        assert len(loaded) == 0
        assert loaded.search(np.zeros(8), 3) == []

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.hnsw"
        path.write_bytes(b"NOTANINDEX")
        with pytest.raises(IndexError_, match="bad index header"):
            HNSWIndex.load(path)
