import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from graphhash.data import TEST
from graphhash.evaluation import (assign_bins, auc, auc_pairwise, evaluate_ctr, evaluate_retrieval,
                                  frequency_percentile, ground_truth, ndcg_at_k, recall_at_k,
                                  retrieved_item_degree, smoothness, subgroup_retrieval, top_k,
                                  two_hop_clusters, write_report)
from graphhash.graph import from_edges
from graphhash.hashing import hash_full
from graphhash.models import ModelConfig, RecModel
from graphhash.training import logloss

from conftest import split_dataset


class TestRecallNdcg:
    def test_recall_example(self):
        assert recall_at_k([3, 1, 7, 2], [1, 2, 9], 4) == pytest.approx(2 / 3)

    def test_recall_truncates_at_k(self):
        assert recall_at_k([3, 1, 7, 2], [1, 2, 9], 2) == pytest.approx(1 / 3)

    def test_recall_denominator_is_test_size(self):
        # more test items than k: the denominator stays |test|
        assert recall_at_k([0, 1], [0, 1, 2, 3], 2) == 0.5

    def test_ndcg_second_position(self):
        assert ndcg_at_k([5, 1], [1], 2) == pytest.approx(1 / math.log2(3), abs=1e-9)
        assert ndcg_at_k([5, 1], [1], 2) == pytest.approx(0.63093, abs=1e-5)

    def test_ndcg_perfect(self):
        assert ndcg_at_k([4, 2, 9], [2, 4], 3) == pytest.approx(1.0)

    def test_ndcg_ideal_capped_at_k(self):
        # three relevant items but k = 2: the ideal list only has two slots
        assert ndcg_at_k([1, 2], [1, 2, 3], 2) == pytest.approx(1.0)

    def test_empty_test_rejected(self):
        with pytest.raises(ValueError):
            recall_at_k([1], [], 1)
        with pytest.raises(ValueError):
            ndcg_at_k([1], [], 1)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 30), min_size=1, max_size=15, unique=True),
           st.lists(st.integers(0, 30), min_size=1, max_size=10, unique=True), st.integers(1, 15))
    def test_bounds(self, ranked, test, k):
        r, n = recall_at_k(ranked, test, k), ndcg_at_k(ranked, test, k)
        assert 0.0 <= r <= 1.0 and 0.0 <= n <= 1.0 + 1e-12
        assert (r == 0) == (n == 0)


class TestAUC:
    def test_example(self):
        assert auc([0.9, 0.4], [0.5, 0.1]) == 0.75

    def test_ties_count_half(self):
        assert auc([0.5], [0.5]) == 0.5
        assert auc([0.5, 0.5], [0.5, 0.1]) == 0.75

    def test_perfect_and_inverted(self):
        assert auc([2, 3], [0, 1]) == 1.0 and auc([0, 1], [2, 3]) == 0.0

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            auc([1.0], [])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=100),
           st.lists(st.integers(0, 6), min_size=1, max_size=100))
    def test_rank_sum_equals_pairwise(self, pos, neg):
        # integer-valued scores force plenty of ties; U/(n_pos n_neg) is a
        # dyadic-free ratio of integers so both paths agree exactly
        a, b = auc(np.array(pos) / 4, np.array(neg) / 4), auc_pairwise(np.array(pos) / 4, np.array(neg) / 4)
        assert a == b


class TestLogLossMetric:
    def test_mean_binary_cross_entropy(self):
        p, y = np.array([0.9, 0.2, 0.6]), np.array([1, 0, 0])
        expected = -(math.log(0.9) + math.log(0.8) + math.log(0.4)) / 3
        assert logloss(p, y) == pytest.approx(expected, abs=1e-12)


class TestTopK:
    def test_excludes_train_items_and_breaks_ties_by_id(self):
        g = from_edges([0], [1], 1, 5)
        assert top_k(np.array([[1.0, 5.0, 1.0, 1.0, 0.0]]), g, np.array([0]), 3).tolist() == [[0, 2, 3]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_matches_full_sort(self, seed, k):
        rng = np.random.default_rng(seed)
        s = rng.integers(0, 4, size=(6, 12)).astype(float)
        g = from_edges(rng.integers(0, 6, 10), rng.integers(0, 12, 10), 6, 12)
        got = top_k(s, g, np.arange(6), k)
        A = g.adjacency().toarray().astype(bool)
        for r in range(6):
            masked = np.where(A[r], -np.inf, s[r])
            ref = np.lexsort((np.arange(12), -masked))[:k]
            assert got[r].tolist() == ref.tolist()


def fixed_model(Z_u, Z_i):
    a = hash_full(len(Z_u), len(Z_i))
    m = RecModel(ModelConfig(dim=Z_u.shape[1]), a, seed=0)
    m.params["user_emb"][:] = Z_u
    m.params["item_emb"][:] = Z_i
    return m


class TestHarness:
    def test_hand_computed_retrieval(self):
        # user 0 trained on item 0; held-out items 1 and 3
        ds = split_dataset([(0, 0), (1, 2)], test=[(0, 1), (0, 3), (1, 1)], n_users=2, n_items=4)
        Z_u = np.array([[1.0, 0.0], [0.0, 1.0]])
        Z_i = np.array([[9.0, 0.0], [1.0, 0.0], [3.0, 0.0], [2.0, 1.0]])
        g = from_edges([0, 1], [0, 2], 2, 4)
        ev = evaluate_retrieval(fixed_model(Z_u, Z_i), ds, g, TEST, k=2)
        # user 0 ranks [2, 3] (0 excluded): recall 1/2, NDCG (1/log2 3)/(1 + 1/log2 3)
        # user 1 ranks [3, 0] (2 excluded, ties on score 0 resolve to lower ID): recall 0
        assert ev["topk"].tolist() == [[2, 3], [3, 0]]
        assert ev["recall"] == pytest.approx(100 * (0.5 + 0.0) / 2, abs=1e-9)
        nd0 = (1 / math.log2(3)) / (1 + 1 / math.log2(3))
        assert ev["ndcg"] == pytest.approx(100 * nd0 / 2, abs=1e-9)

    def test_ground_truth_deduplicates(self):
        ds = split_dataset([(0, 0)], test=[(0, 1), (0, 1), (1, 0)], n_users=2, n_items=2)
        gt = ground_truth(ds, TEST)
        assert {u: v.tolist() for u, v in gt.items()} == {0: [1], 1: [0]}

    def test_threads_do_not_change_results(self, toy_ds, toy_graph):
        m = RecModel(ModelConfig(dim=8), hash_full(toy_ds.n_users, toy_ds.n_items), seed=3)
        a = evaluate_retrieval(m, toy_ds, toy_graph, TEST, 5, threads=1, chunk=7)
        b = evaluate_retrieval(m, toy_ds, toy_graph, TEST, 5, threads=4, chunk=7)
        assert np.array_equal(a["topk"], b["topk"]) and a["recall"] == b["recall"]

    def test_ctr(self):
        ds = split_dataset([(0, 0)], test=[(0, 0), (0, 1)], n_users=1, n_items=2, labels=[1, 1, 0])
        m = RecModel(ModelConfig("ctr_logistic", dim=1, loss="logloss"), hash_full(1, 2), seed=0)
        m.params["user_emb"][:] = 0.0
        m.params["item_bias"][:] = [2.0, -1.0]
        ev = evaluate_ctr(m, ds, TEST)
        p1, p0 = 1 / (1 + math.exp(-2.0)), 1 / (1 + math.exp(1.0))
        assert ev["logloss"] == pytest.approx(-(math.log(p1) + math.log(1 - p0)) / 2, abs=1e-6)
        assert ev["auc"] == 1.0


class TestSubgroups:
    def test_percentile_ties_by_id(self):
        assert frequency_percentile(np.array([5, 1, 5, 3])).tolist() == [50.0, 0.0, 75.0, 25.0]

    def test_bins(self):
        assert assign_bins(np.array([0.0, 19.9, 20.0, 99.9])).tolist() == [0, 0, 1, 4]

    def test_empty_bin_absent_and_weighted_mean(self, rng):
        freq = np.arange(10)
        users = np.array([0, 1, 9])  # nobody from the 20-80 range is evaluated
        rec = rng.random(3)
        out = subgroup_retrieval({"recall": rec}, users, freq)
        assert set(out) == {"0-20", "80-100"}
        overall = sum(e["n_users"] * e["recall"] for e in out.values()) / len(users)
        assert overall == pytest.approx(100 * rec.mean())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_weighted_mean_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 60))
        freq = rng.integers(1, 10, n)
        users = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        rec = rng.random(len(users))
        out = subgroup_retrieval({"recall": rec}, users, freq)
        assert sum(e["n_users"] for e in out.values()) == len(users)
        total = sum(e["n_users"] * e["recall"] for e in out.values())
        assert total / len(users) == pytest.approx(100 * rec.mean(), rel=1e-9)


def smoothness_oracle(X, groups):
    return float(np.mean([np.mean([np.sum((X[u] - X[v]) ** 2) for v in grp]) for u, grp in enumerate(groups)]))


class TestSmoothness:
    def test_two_points(self):
        X = np.array([[0.0, 0.0], [2.0, 0.0]])
        # each node: (0 + 4) / 2 = 2
        assert smoothness(X, np.array([0, 0])) == pytest.approx(2.0)

    def test_singletons_are_zero(self, rng):
        assert smoothness(rng.normal(size=(5, 3)), np.arange(5)) == 0.0

    def test_translation_and_scale(self, rng):
        X, lab = rng.normal(size=(12, 4)), rng.integers(0, 3, 12)
        s = smoothness(X, lab)
        assert smoothness(X + 7.5, lab) == pytest.approx(s, rel=1e-9)
        assert smoothness(3 * X, lab) == pytest.approx(9 * s, rel=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_labels_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 20))
        X, lab = rng.normal(size=(n, 3)), rng.integers(0, 4, n)
        groups = [np.flatnonzero(lab == lab[u]) for u in range(n)]
        assert smoothness(X, lab) == pytest.approx(smoothness_oracle(X, groups), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_two_hop_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        nu, ni = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        e = int(rng.integers(1, 25))
        g = from_edges(rng.integers(0, nu, e), rng.integers(0, ni, e), nu, ni)
        A = g.adjacency().toarray() > 0
        X = rng.normal(size=(nu, 3))
        groups = [np.flatnonzero((A[u] & A).any(axis=1) | (np.arange(nu) == u)) for u in range(nu)]
        M = two_hop_clusters(g, "user")
        assert [np.flatnonzero(M[u].toarray()).tolist() for u in range(nu)] == [x.tolist() for x in groups]
        assert smoothness(X, M) == pytest.approx(smoothness_oracle(X, groups), abs=1e-9)

    def test_two_hop_items(self):
        g = from_edges([0, 0, 1], [0, 1, 2], 2, 3)
        M = two_hop_clusters(g, "item").toarray()
        assert M.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            smoothness(np.zeros((0, 2)), np.zeros(0))
        with pytest.raises(ValueError):
            smoothness(np.zeros((3, 2)), sp.identity(2, format="csr"))


class TestRetrievedDegree:
    def test_mean_degree(self):
        g = from_edges([0, 1, 1, 2], [0, 0, 1, 0], 3, 2)  # degrees: item0 3, item1 1
        assert retrieved_item_degree([[0, 1], [0, 0]], g) == pytest.approx((3 + 1 + 3 + 3) / 4)

    def test_empty(self):
        with pytest.raises(ValueError):
            retrieved_item_degree([], from_edges([0], [0]))


class TestReportFiles:
    def test_json_and_csv(self, tmp_path):
        report = {"task": "retrieval", "recall_at_20": 12.5, "n_params": 10,
                  "subgroups": {"0-20": {"n_users": 3, "recall": 5.0}}}
        write_report(report, tmp_path / "m.json", tmp_path / "m.csv", "graphhash", "mf")
        assert json.loads((tmp_path / "m.json").read_text()) == report
        assert (tmp_path / "m.csv").read_text().splitlines() == [
            "scheme,backbone,metric,bin,value",
            "graphhash,mf,recall_at_20,all,12.5",
            "graphhash,mf,n_params,all,10",
            "graphhash,mf,n_users,0-20,3",
            "graphhash,mf,recall,0-20,5.0",
        ]
