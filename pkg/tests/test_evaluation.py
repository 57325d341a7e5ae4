import math

import numpy as np
import pytest
import torch

from causaldiffrec.data import InteractionTable, SplitBundle
from causaldiffrec.evaluation import (RankingReport, compare_iid_ood, evaluate,
                                      export_embeddings, import_embeddings,
                                      ndcg_at_k, popularity_tags, recall_at_k)
from causaldiffrec.seeding import numpy_rng

NDCG_SINGLE_AT_RANK2 = 0.6309297535714574  # 1 / log2(3), mpmath


def brute_force_metrics(ranked, relevant, k):
    """Independent reference: literal DCG/IDCG sums and hit counting."""
    top = list(ranked)[:k]
    hits = [i for i, item in enumerate(top, start=1) if item in relevant]
    recall = len(hits) / len(relevant)
    dcg = sum(1.0 / math.log2(r + 1) for r in hits)
    ideal = sum(1.0 / math.log2(r + 1)
                for r in range(1, min(k, len(relevant)) + 1))
    return recall, dcg / ideal


class TestMetrics:
    def test_all_relevant_in_topk(self):
        assert recall_at_k([1, 2, 3], {1, 2, 3}, 10) == 1.0
        assert ndcg_at_k([1, 2, 3], {1, 2, 3}, 10) == 1.0

    def test_none_in_topk(self):
        assert recall_at_k([4, 5], {1}, 2) == 0.0
        assert ndcg_at_k([4, 5], {1}, 2) == 0.0

    def test_partial_hit_counting(self):
        assert recall_at_k([9, 8, 1, 7], {1, 2}, 10) == 0.5

    def test_single_relevant_at_rank_two(self):
        val = ndcg_at_k([5, 1], {1}, 2)
        assert val == pytest.approx(NDCG_SINGLE_AT_RANK2, abs=1e-12)

    def test_matches_brute_force_on_random_instances(self):
        rng = numpy_rng(0, "metric_oracle")
        for _ in range(100):
            n = int(rng.integers(3, 40))
            ranked = rng.permutation(n).tolist()
            relevant = set(rng.choice(n, size=int(rng.integers(1, n)),
                                      replace=False).tolist())
            k = int(rng.integers(1, n + 1))
            r_ref, n_ref = brute_force_metrics(ranked, relevant, k)
            assert recall_at_k(ranked, relevant, k) == pytest.approx(r_ref, abs=1e-12)
            assert ndcg_at_k(ranked, relevant, k) == pytest.approx(n_ref, abs=1e-12)

    def test_bounds(self):
        rng = numpy_rng(1, "metric_bounds")
        for _ in range(50):
            ranked = rng.permutation(20).tolist()
            relevant = set(rng.choice(20, size=5, replace=False).tolist())
            for k in (1, 5, 10):
                assert 0.0 <= recall_at_k(ranked, relevant, k) <= 1.0
                assert 0.0 <= ndcg_at_k(ranked, relevant, k) <= 1.0

    def test_empty_relevant_rejected(self):
        with pytest.raises(ValueError):
            recall_at_k([1], set(), 1)


def tiny_bundle():
    train = InteractionTable([0, 0, 1, 1, 2, 2], [0, 1, 1, 2, 0, 3],
                             num_users=3, num_items=5)
    test = InteractionTable([0, 1, 2, 2], [2, 3, 1, 4],
                            num_users=3, num_items=5)
    valid = train.subset(np.array([], dtype=np.int64))
    return SplitBundle(train, valid, test, "random_iid")


class TestEvaluate:
    def oracle_embeddings(self, bundle):
        """Scores items by true test membership: perfect metrics expected."""
        m, n = bundle.train.num_users, bundle.train.num_items
        final = torch.zeros(m + n, n, dtype=torch.float64)
        for u in range(m):
            final[u, :] = 0.0
        for i in range(n):
            final[m + i, i] = 1.0
        for u, i in zip(bundle.test.users, bundle.test.items):
            final[u, i] = 1.0
        return final

    def test_oracle_scores_reach_one(self):
        bundle = tiny_bundle()
        report = evaluate(self.oracle_embeddings(bundle), bundle, ks=(10,))
        assert report.aggregate("recall", 10) == 1.0
        assert report.aggregate("ndcg", 10) == 1.0

    def test_constant_scores_equal_index_order_ranking(self):
        bundle = tiny_bundle()
        m, n = 3, 5
        final = torch.ones(m + n, 2, dtype=torch.float64)
        report = evaluate(final, bundle, ks=(2,))
        # ties: user ranks non-train items ascending by index
        from causaldiffrec.evaluation import recall_at_k as rk
        expected = []
        train_items = bundle.train.items_by_user()
        test_items = bundle.test.items_by_user()
        for u in np.unique(bundle.test.users):
            ranked = [i for i in range(n) if i not in set(train_items[u])]
            expected.append(rk(ranked, set(test_items[u].tolist()), 2))
        assert report.aggregate("recall", 2) == pytest.approx(np.mean(expected))

    def test_hand_computed_three_user_instance(self):
        bundle = tiny_bundle()
        m, n = 3, 5
        emb = torch.zeros(m + n, m, dtype=torch.float64)
        for u in range(m):
            emb[u, u] = 1.0
        # user 0 scores: i2 > i3 > i4 (train 0,1 excluded)
        emb[m + 2, 0], emb[m + 3, 0], emb[m + 4, 0] = 3.0, 2.0, 1.0
        # user 1: relevant item 3 ranked second among {0,3,4}
        emb[m + 0, 1], emb[m + 3, 1], emb[m + 4, 1] = 3.0, 2.0, 1.0
        # user 2: relevant items 1,4 at ranks 1 and 3 among {1,2,4}
        emb[m + 1, 2], emb[m + 2, 2], emb[m + 4, 2] = 3.0, 2.0, 1.0
        report = evaluate(emb, bundle, ks=(2,))
        r0 = 1.0                      # item 2 at rank 1
        r1 = 1.0                      # item 3 at rank 2, k=2
        r2 = 0.5                      # only item 1 of {1,4} in top 2
        assert report.aggregate("recall", 2) == pytest.approx((r0 + r1 + r2) / 3)
        n0 = 1.0
        n1 = NDCG_SINGLE_AT_RANK2
        n2 = 1.0 / (1.0 + 1.0 / math.log2(3))
        assert report.aggregate("ndcg", 2) == pytest.approx((n0 + n1 + n2) / 3)

    def test_invariant_to_test_record_order(self):
        bundle = tiny_bundle()
        final = self.oracle_embeddings(bundle)
        shuffled = SplitBundle(bundle.train, bundle.valid,
                               bundle.test.subset(np.array([3, 1, 0, 2])),
                               "random_iid")
        a = evaluate(final, bundle, ks=(2, 4))
        b = evaluate(final, shuffled, ks=(2, 4))
        assert a.metrics() == b.metrics()

    def test_aggregate_is_mean_of_per_user(self):
        bundle = tiny_bundle()
        report = evaluate(self.oracle_embeddings(bundle), bundle, ks=(2,))
        for name, vals in report.per_user.items():
            assert abs(report.metrics()[name] - vals.mean()) < 1e-9

    def test_no_test_users_error(self):
        bundle = tiny_bundle()
        empty = SplitBundle(bundle.train, bundle.valid,
                            bundle.test.subset(np.array([], dtype=np.int64)),
                            "random_iid")
        with pytest.raises(ValueError, match="no test users"):
            evaluate(torch.zeros(8, 2, dtype=torch.float64), empty)


class TestCompare:
    def report_with(self, vals):
        per_user = {name: np.array([v]) for name, v in vals.items()}
        return RankingReport("x", (10,), per_user, np.array([0]))

    def test_identical_reports_zero_drop(self):
        a = self.report_with({"recall@10": 0.5, "ndcg@10": 0.4})
        drops = compare_iid_ood(a, a)
        assert drops["recall@10"] == 0.0
        assert drops["average"] == 0.0

    def test_thirty_percent_drop(self):
        iid = self.report_with({"recall@10": 0.10})
        ood = self.report_with({"recall@10": 0.07})
        drops = compare_iid_ood(iid, ood)
        assert drops["recall@10"] == pytest.approx(0.30)

    def test_zero_iid_metric_undefined(self):
        iid = self.report_with({"recall@10": 0.0, "ndcg@10": 0.5})
        ood = self.report_with({"recall@10": 0.1, "ndcg@10": 0.25})
        drops = compare_iid_ood(iid, ood)
        assert drops["recall@10"] is None
        assert drops["average"] == pytest.approx(0.5)

    def test_mismatched_ks_rejected(self):
        a = self.report_with({"recall@10": 0.5})
        b = RankingReport("y", (20,), {"recall@20": np.array([0.5])},
                          np.array([0]))
        with pytest.raises(ValueError):
            compare_iid_ood(a, b)


class TestExport:
    def test_row_shape(self, tmp_path):
        emb = np.arange(30, dtype=np.float64).reshape(10, 3)
        counts = np.arange(10)
        path = tmp_path / "emb.tsv"
        export_embeddings(emb, counts, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 10
        assert all(len(line.split("\t")) == 5 for line in lines)

    def test_popularity_decile_tags(self):
        counts = np.array([100, 90, 80, 70, 60, 50, 40, 30, 20, 10])
        tags = popularity_tags(counts)
        assert tags[0] == "popular"
        assert tags[9] == "unpopular"
        assert tags[4] == "mid"

    def test_tag_ties_break_by_item_index(self):
        counts = np.array([5, 5, 5, 5, 5, 5, 5, 5, 5, 5])
        tags = popularity_tags(counts)
        assert tags[0] == "popular"
        assert tags[9] == "unpopular"

    def test_round_trip_bitwise(self, tmp_path):
        rng = numpy_rng(0, "export_rt")
        emb = rng.normal(0, 1, size=(25, 4))
        counts = rng.integers(0, 50, size=25)
        path = tmp_path / "emb.tsv"
        export_embeddings(emb, counts, path)
        back, tags = import_embeddings(path)
        assert np.array_equal(back, emb)  # %.17g round-trips float64 exactly
        assert len(tags) == 25
