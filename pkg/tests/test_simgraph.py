import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkgcm.dataio import AdjacencyMatrix, TrafficSeries
from dkgcm.simgraph import (ClusterAssignment, build_cluster_subgraphs, cluster_nodes,
                            cosine_similarity_matrix, dtw_distance, dtw_matrix,
                            kmeans_cluster)

from oracles import best_partition_inertia, dtw_exhaustive, same_partition

seqs = st.lists(st.integers(-20, 20), min_size=1, max_size=8).map(
    lambda v: np.array(v, dtype=np.float64))


class TestDtw:
    @pytest.mark.parametrize("a, b, want", [([4.0], [4.0], 0.0),
                                            ([0, 0, 0], [1, 1, 1], 3.0),
                                            ([1, 2, 3], [1, 2, 2, 3], 0.0)])
    def test_hand_examples(self, a, b, want):
        assert dtw_distance(a, b) == want

    def test_matches_exhaustive_paths(self, rng):
        for _ in range(100):
            a = rng.integers(-9, 10, rng.integers(1, 9)).astype(float)
            b = rng.integers(-9, 10, rng.integers(1, 9)).astype(float)
            assert dtw_distance(a, b) == dtw_exhaustive(a, b)

    @settings(max_examples=80, deadline=None)
    @given(seqs, seqs)
    def test_symmetric_and_nonnegative(self, a, b):
        d = dtw_distance(a, b)
        assert d >= 0
        assert d == dtw_distance(b, a)
        assert dtw_distance(a, a) == 0

    @settings(max_examples=60, deadline=None)
    @given(seqs, seqs)
    def test_band_never_shortens(self, a, b):
        full = dtw_distance(a, b)
        w = abs(a.size - b.size)
        banded = dtw_distance(a, b, window=w)
        assert banded >= full
        assert dtw_distance(a, b, window=max(a.size, b.size)) == full

    def test_band_zero_is_pointwise(self, rng):
        a, b = rng.normal(size=7), rng.normal(size=7)
        assert dtw_distance(a, b, window=0) == pytest.approx(np.abs(a - b).sum(), rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            dtw_distance([], [1.0])
        with pytest.raises(ValueError):
            dtw_distance([np.nan], [1.0])
        with pytest.raises(ValueError, match="band"):
            dtw_distance([1.0, 2, 3, 4], [1.0], window=1)


class TestDtwMatrix:
    def test_single_node(self):
        np.testing.assert_array_equal(dtw_matrix(np.ones((5, 1))).dist, [[0.0]])

    def test_identical_columns(self, rng):
        col = rng.normal(size=10)
        assert dtw_matrix(np.stack([col, col], axis=1)).dist[0, 1] == 0

    def test_against_oracle(self, rng):
        x = rng.integers(-5, 6, size=(6, 3)).astype(float)
        d = dtw_matrix(x).dist
        for i in range(3):
            for j in range(3):
                assert d[i, j] == dtw_exhaustive(x[:, i], x[:, j])
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), 0)

    def test_csv_format(self, tmp_path, rng):
        m = dtw_matrix(rng.normal(size=(8, 3)))
        m.to_csv(tmp_path / "d.csv")
        rows = (tmp_path / "d.csv").read_text().splitlines()
        assert len(rows) == 3 and all(len(r.split(",")) == 3 for r in rows)
        np.testing.assert_allclose(np.loadtxt(tmp_path / "d.csv", delimiter=","), m.dist,
                                   rtol=1e-5)


def _blobs(rng):
    a = rng.uniform(-0.1, 0.1, (4, 2))
    b = 10 + rng.uniform(-0.1, 0.1, (4, 2))
    return np.concatenate([a, b])


class TestKmeans:
    def test_k1_is_mean(self, rng):
        x = rng.normal(size=(9, 3))
        res = kmeans_cluster(x, 1)
        assert np.all(res.labels == 0)
        np.testing.assert_allclose(res.centers[0], x.mean(axis=0))

    def test_two_blobs_match_brute_force(self, rng):
        x = _blobs(rng)
        res = kmeans_cluster(x, 2, seed=3)
        best, labels = best_partition_inertia(x, 2)
        assert same_partition(res.labels, labels)
        assert res.inertia == pytest.approx(best, rel=1e-9)

    def test_small_sets_reach_optimum_or_above(self, rng):
        for _ in range(10):
            x = rng.normal(size=(7, 2))
            res = kmeans_cluster(x, 3, seed=int(rng.integers(100)))
            best, _ = best_partition_inertia(x, 3)
            assert res.inertia >= best - 1e-9

    def test_k_equals_n(self, rng):
        x = rng.normal(size=(5, 2))
        res = kmeans_cluster(x, 5)
        assert sorted(res.labels.tolist()) == list(range(5))
        assert res.inertia == pytest.approx(0, abs=1e-12)

    def test_invariants(self, rng):
        x = rng.normal(size=(30, 4))
        res = kmeans_cluster(x, 4, seed=7)
        assert np.all(np.diff(res.inertia_history) <= 1e-9)
        assert set(res.labels.tolist()) == set(range(4))
        direct = sum(((x[i] - res.centers[res.labels[i]]) ** 2).sum() for i in range(30))
        assert res.inertia == pytest.approx(direct, rel=1e-12)
        again = kmeans_cluster(x, 4, seed=7)
        np.testing.assert_array_equal(res.labels, again.labels)

    def test_fixed_point(self, rng):
        x = _blobs(rng)
        res = kmeans_cluster(x, 2, seed=0)
        means = np.stack([x[res.labels == k].mean(axis=0) for k in range(2)])
        reassigned = np.argmin(((x[:, None] - means[None]) ** 2).sum(-1), axis=1)
        np.testing.assert_array_equal(reassigned, res.labels)

    def test_errors(self, rng):
        x = rng.normal(size=(3, 2))
        with pytest.raises(ValueError):
            kmeans_cluster(x, 0)
        with pytest.raises(ValueError):
            kmeans_cluster(x, 4)


class TestClusterNodes:
    def test_sine_vs_ramp(self):
        t = np.arange(24.0)
        sine = np.sin(2 * np.pi * t / 12)
        ramp = (t % 12) / 6 - 1
        x = np.stack([sine, ramp, sine, ramp], axis=1)
        res = cluster_nodes(x, K=2, seed=0)
        assert res.labels[0] == res.labels[2]
        assert res.labels[1] == res.labels[3]
        assert res.labels[0] != res.labels[1]

    def test_duplicates_share_label(self, rng):
        x = rng.normal(size=(20, 6))
        x[:, 4] = x[:, 1]
        for K in (2, 3, 4):
            res = cluster_nodes(TrafficSeries(x, list("abcdef")), K=K, seed=K)
            assert res.labels[1] == res.labels[4]

    def test_k1(self, rng):
        res = cluster_nodes(rng.normal(size=(10, 4)), K=1)
        assert np.all(res.labels == 0)

    def test_json(self, tmp_path, rng):
        res = cluster_nodes(rng.normal(size=(10, 4)), K=2, seed=5)
        res.save(tmp_path / "c.json")
        body = json.loads((tmp_path / "c.json").read_text())
        assert set(body) == {"K", "seed", "labels", "inertia"}
        assert body["labels"] == res.labels.tolist() and body["seed"] == 5


class TestSubgraphs:
    def test_four_cycle(self):
        w = np.zeros((4, 4))
        for i in range(4):
            w[i, (i + 1) % 4] = w[(i + 1) % 4, i] = 1.0
        subs = build_cluster_subgraphs(AdjacencyMatrix(w, list("abcd")),
                                       ClusterAssignment.from_labels([0, 1, 0, 1]))
        assert [s.member_nodes.tolist() for s in subs] == [[0, 2], [1, 3]]
        for s in subs:
            np.testing.assert_array_equal(s.adjacency, np.zeros((2, 2)))

    def test_restriction_and_partition(self, rng):
        w = rng.uniform(size=(7, 7))
        w = np.triu(w, 1) + np.triu(w, 1).T
        labels = np.array([2, 0, 1, 0, 2, 2, 1])
        subs = build_cluster_subgraphs(w, ClusterAssignment.from_labels(labels))
        members = np.sort(np.concatenate([s.member_nodes for s in subs]))
        np.testing.assert_array_equal(members, np.arange(7))
        for s in subs:
            np.testing.assert_array_equal(s.adjacency, w[np.ix_(s.member_nodes, s.member_nodes)])
            assert np.all(np.diff(s.member_nodes) > 0)

    def test_single_cluster_and_singleton(self, rng):
        w = np.ones((3, 3)) - np.eye(3)
        one = build_cluster_subgraphs(w, ClusterAssignment.from_labels([0, 0, 0]))
        np.testing.assert_array_equal(one[0].adjacency, w)
        sing = build_cluster_subgraphs(w, ClusterAssignment.from_labels([0, 0, 1]))
        np.testing.assert_array_equal(sing[1].adjacency, [[0.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            build_cluster_subgraphs(np.zeros((3, 3)), ClusterAssignment.from_labels([0, 1]))


class TestCosine:
    def test_examples(self):
        x = np.array([[1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 1.0, 0.0]])
        c = cosine_similarity_matrix(x)
        assert c[0, 1] == pytest.approx(0.0)
        assert c[2, 3] == pytest.approx(1 / np.sqrt(2))
        assert c[0, 3] == pytest.approx(1.0)
        np.testing.assert_array_equal(np.diag(c), 1)

    def test_zero_column(self):
        c = cosine_similarity_matrix(np.array([[0.0, 1.0], [0.0, 2.0]]))
        np.testing.assert_array_equal(c, np.eye(2))

    def test_range_and_symmetry(self, rng):
        c = cosine_similarity_matrix(rng.normal(size=(20, 6)))
        np.testing.assert_array_equal(c, c.T)
        assert np.all(np.abs(c) <= 1)
