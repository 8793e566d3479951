import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphhash.clustering import (Partition, brute_force_partition, iter_set_partitions, louvain, modularity,
                                  random_walk_forms_check, read_partition, relabel, write_partition)
from graphhash.datasets import community_graph, random_bipartite
from graphhash.errors import DataError
from graphhash.graph import from_edges


def small_graphs(max_nodes=8):
    return st.integers(0, 2**32 - 1).map(lambda s: random_bipartite(np.random.default_rng(s), max_nodes))


def q_by_hand(g, p, gamma=1.0):
    """Direct double sum over user/item pairs."""
    A = g.adjacency().toarray()
    k, d, m = g.k, g.d, g.m
    total = 0.0
    for u in range(g.n_users):
        for i in range(g.n_items):
            if p.user_label[u] == p.item_label[i]:
                total += A[u, i] - gamma * k[u] * d[i] / m
    return total / m


def all_in_one(g):
    return Partition(np.zeros(g.n_users, int), np.zeros(g.n_items, int))


class TestModularity:
    def test_all_in_one_is_zero(self, two_block):
        assert modularity(two_block, all_in_one(two_block)) == 0.0

    def test_diagonal_two_pairs(self, diagonal):
        p = Partition([0, 1], [0, 1])
        assert modularity(diagonal, p) == pytest.approx(0.5, abs=1e-15)

    def test_singletons_score_zero(self, rng):
        g = random_bipartite(rng, 6)
        p = Partition(np.arange(g.n_users), np.arange(g.n_users, g.n_users + g.n_items))
        assert modularity(g, p) == 0.0

    def test_resolution_scales_null_term(self, diagonal):
        p = Partition([0, 1], [0, 1])
        # within = 2, sum K_C D_C = 2, m = 2
        assert modularity(diagonal, p, resolution=2.0) == pytest.approx((2 - 2.0 * 2 / 2) / 2)

    def test_empty_graph_raises(self):
        with pytest.raises(DataError):
            modularity(from_edges([], [], 2, 2), Partition([0, 1], [0, 1]))

    def test_partition_must_cover(self, diagonal):
        with pytest.raises(DataError):
            modularity(diagonal, Partition([0], [0, 1]))

    @settings(max_examples=50, deadline=None)
    @given(small_graphs(), st.integers(0, 2**32 - 1), st.sampled_from([0.5, 1.0, 3.0]))
    def test_matches_double_sum(self, g, seed, gamma):
        r = np.random.default_rng(seed)
        n = g.n_users + g.n_items
        lab = r.integers(0, max(1, n // 2), size=n)
        p = Partition(lab[:g.n_users], lab[g.n_users:])
        assert modularity(g, p, gamma) == pytest.approx(q_by_hand(g, p, gamma), abs=1e-12)
        assert modularity(g, p) <= 1.0


class TestRandomWalkForms:
    def test_diagonal(self, diagonal):
        assert random_walk_forms_check(diagonal, Partition([0, 1], [0, 1])) == pytest.approx((0.5,) * 3, abs=1e-15)

    def test_all_in_one(self, two_block):
        qa, qb, qc = random_walk_forms_check(two_block, all_in_one(two_block))
        assert abs(qa) < 1e-15 and abs(qb) < 1e-15 and abs(qc) < 1e-15

    @settings(max_examples=60, deadline=None)
    @given(small_graphs(10), st.integers(0, 2**32 - 1))
    def test_forms_agree(self, g, seed):
        r = np.random.default_rng(seed)
        n = g.n_users + g.n_items
        lab = r.integers(0, 3, size=n)
        p = Partition(lab[:g.n_users], lab[g.n_users:])
        qa, qb, qc = random_walk_forms_check(g, p)
        assert abs(qa - qb) < 1e-12 and abs(qa - qc) < 1e-12
        assert abs(qa - modularity(g, p)) < 1e-12


class TestRelabel:
    def test_first_appearance(self):
        p = relabel(Partition([7, 7, 2], [9, 2]))
        assert p.user_label.tolist() == [0, 0, 1] and p.item_label.tolist() == [2, 1]

    def test_fixed_point(self):
        p = Partition([0, 1, 1], [2, 0])
        assert relabel(p).same_as(p)

    def test_single_label(self):
        p = relabel(Partition([5, 5], [5]))
        assert p.labels.tolist() == [0, 0, 0] and p.n_clusters == 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12), st.integers(0, 12))
    def test_preserves_membership(self, labels, cut):
        cut = min(cut, len(labels))
        p = Partition(labels[:cut], labels[cut:])
        q = relabel(p)
        a, b = p.labels, q.labels
        assert np.array_equal(a[:, None] == a[None, :], b[:, None] == b[None, :])
        assert set(b.tolist()) == set(range(q.n_clusters))


class TestBruteForce:
    def test_bell_numbers(self):
        bell = [1, 1, 2, 5, 15, 52, 203, 877, 4140]
        for n, b in enumerate(bell):
            assert sum(1 for _ in iter_set_partitions(range(n))) == b

    def test_diagonal(self, diagonal):
        p, q = brute_force_partition(diagonal)
        assert q == pytest.approx(0.5)
        assert p.user_label.tolist() == [0, 1] and p.item_label.tolist() == [0, 1]

    def test_single_edge(self):
        p, q = brute_force_partition(from_edges([0], [0], 1, 1))
        assert q == 0.0

    def test_complete_block(self):
        g = from_edges([0, 0, 1, 1], [0, 1, 0, 1], 2, 2)
        p, q = brute_force_partition(g)
        assert q == pytest.approx(0.0, abs=1e-15) and p.n_clusters == 1

    def test_size_bound(self):
        g = from_edges([0], [0], 6, 5)
        with pytest.raises(ValueError):
            brute_force_partition(g)

    def test_q_is_max_over_enumeration(self, rng):
        g = random_bipartite(rng, 6)
        nodes = list(range(g.n_users + g.n_items))
        best = -math.inf
        for blocks in iter_set_partitions(nodes):
            lab = np.empty(len(nodes), int)
            for c, blk in enumerate(blocks):
                lab[blk] = c
            best = max(best, modularity(g, Partition(lab[:g.n_users], lab[g.n_users:])))
        assert brute_force_partition(g)[1] == pytest.approx(best, abs=1e-12)


class TestLouvain:
    def test_two_block(self, two_block):
        p = louvain(two_block)
        assert p.n_clusters == 2
        assert p.user_label.tolist() == [0, 0, 1, 1] and p.item_label.tolist() == [0, 0, 1, 1]
        assert modularity(two_block, p) == pytest.approx(brute_force_partition(two_block)[1], abs=1e-12)

    def test_diagonal(self, diagonal):
        assert modularity(diagonal, louvain(diagonal)) == pytest.approx(0.5)

    def test_empty_graph(self):
        with pytest.raises(DataError):
            louvain(from_edges([], [], 2, 2))

    def test_bad_resolution(self, diagonal):
        with pytest.raises(ValueError):
            louvain(diagonal, resolution=0)

    def test_isolated_nodes_are_singletons(self):
        g = from_edges([0, 1], [0, 0], 4, 3)
        p = louvain(g)
        assert len({p.user_label[2], p.user_label[3], p.item_label[1], p.item_label[2]}) == 4
        assert not {p.user_label[2], p.item_label[1]} & {p.user_label[0], p.item_label[0]}

    @settings(max_examples=80, deadline=None)
    @given(small_graphs(8), st.sampled_from([0.5, 1.0, 2.0]))
    def test_never_beats_oracle(self, g, gamma):
        p = louvain(g, gamma)
        q = modularity(g, p)
        assert q <= brute_force_partition(g, gamma)[1] + 1e-12
        # louvain starts from singletons (Q = 0) and only accepts improving moves
        assert q >= -1e-12

    @settings(max_examples=40, deadline=None)
    @given(small_graphs(10))
    def test_trace_monotone(self, g):
        tr = louvain(g).trace
        assert all(b > a for a, b in zip(tr, tr[1:]))
        assert tr[-1] == pytest.approx(modularity(g, louvain(g)), abs=1e-12)

    def test_trace_monotone_desk_graph(self):
        g = community_graph(300, 400, 4000, 12, seed=1)
        p = louvain(g)
        assert all(b > a for a, b in zip(p.trace, p.trace[1:]))
        assert p.trace[-1] == pytest.approx(modularity(g, p), abs=1e-9)

    def test_deterministic(self):
        g = community_graph(200, 300, 3000, 8, seed=2)
        first = louvain(g, 2.0)
        for _ in range(9):
            assert louvain(g, 2.0).same_as(first)

    def test_recovers_planted_blocks(self):
        # 3 disjoint complete blocks
        edges = [(u + 3 * b, i + 4 * b) for b in range(3) for u in range(3) for i in range(4)]
        g = from_edges([e[0] for e in edges], [e[1] for e in edges], 9, 12)
        p = louvain(g)
        assert p.n_clusters == 3
        assert p.user_label.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]

    def test_resolution_grows_cluster_count(self):
        g = community_graph(300, 400, 4000, 12, seed=3)
        counts = [louvain(g, r).n_clusters for r in (0.5, 1, 2, 4, 8)]
        assert counts == sorted(counts)


class TestPartitionFile:
    def test_round_trip(self, tmp_path, two_block):
        p = louvain(two_block)
        write_partition(p, tmp_path / "p.tsv", q=0.5, extra={"config_hash": "abc"})
        back, header = read_partition(tmp_path / "p.tsv")
        assert back.same_as(p)
        assert header["Q"] == "0.5" and header["config_hash"] == "abc" and header["n_clusters"] == "2"

    def test_format(self, tmp_path, diagonal):
        write_partition(Partition([0, 1], [0, 1]), tmp_path / "p.tsv")
        lines = (tmp_path / "p.tsv").read_text().splitlines()
        assert lines[0] == "# resolution=1.0"
        assert lines[-4:] == ["U\t0\t0", "U\t1\t1", "I\t0\t0", "I\t1\t1"]

    def test_gap_rejected(self, tmp_path):
        (tmp_path / "p.tsv").write_text("U\t0\t0\nU\t2\t0\n")
        with pytest.raises(DataError):
            read_partition(tmp_path / "p.tsv")
