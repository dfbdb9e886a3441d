"""Unit test of `metrics` module."""

import logging
import math
import unittest

import numpy
import pytest
import torch

from llmgpr.errors import UsageError
from llmgpr.grouprep import score_candidates
from llmgpr.metrics import MetricsReport, hr_at_k, ndcg_at_k

logger = logging.getLogger("test_info")


class TestMetrics(unittest.TestCase):
    """Unit test of HR@k and NDCG@k."""

    def test_single(self):
        assert hr_at_k(1, 5) == 1
        assert hr_at_k(5, 5) == 1
        assert hr_at_k(6, 5) == 0
        assert ndcg_at_k(1, 10) == 1.0
        assert ndcg_at_k(3, 10) == pytest.approx(0.5)
        assert ndcg_at_k(10, 10) == pytest.approx(1 / math.log2(11))
        assert ndcg_at_k(11, 10) == 0.0
        for bad in [(0, 5), (1, 0)]:
            with pytest.raises(UsageError):
                hr_at_k(*bad)

    def test_report(self):
        ids = ["a", "b", "c", "d"]
        report = MetricsReport.from_ranks([1, 3, 7, 40], [10, 5, 10], ids)
        assert report.k_list == [5, 10]
        assert report.n == 4
        assert report.hr[5] == pytest.approx(0.5)
        assert report.hr[10] == pytest.approx(0.75)
        assert report.ndcg[5] == pytest.approx((1 + 0.5) / 4)
        row = report.as_row(variant="LLMGPR", split="test")
        assert list(row) == [
            "variant",
            "split",
            "n",
            "HR@5",
            "NDCG@5",
            "HR@10",
            "NDCG@10",
        ]
        assert report.as_dict()["ranks"] == {"a": 1, "b": 3, "c": 7, "d": 40}
        assert MetricsReport.from_ranks([2]).as_dict()["ranks"] == [2]

    def test_brute_force(self):
        rng = numpy.random.default_rng(1)
        ranks = [int(r) for r in rng.integers(1, 30, 200)]
        report = MetricsReport.from_ranks(ranks, [1, 5, 20])
        for k in (1, 5, 20):
            hits = [r for r in ranks if r <= k]
            assert report.hr[k] == pytest.approx(len(hits) / len(ranks))
            gains = sum(1 / math.log2(r + 1) for r in hits)
            assert report.ndcg[k] == pytest.approx(gains / len(ranks))
            assert report.ndcg[k] <= report.hr[k]

    def test_score_vectors(self):
        rng = numpy.random.default_rng(7)
        ranks, hr, ndcg = [], {5: 0, 10: 0}, {5: 0.0, 10: 0.0}
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            logits = rng.normal(size=n)
            target = int(rng.integers(n))
            ids = ["c{}".format(i) for i in range(n)]
            scores = score_candidates(
                torch.ones(1, dtype=torch.float64),
                torch.as_tensor(logits).reshape(n, 1),
                ids,
            )
            order = sorted(range(n), key=lambda i: -logits[i])
            rank = order.index(target) + 1
            assert scores.rank_of(ids[target]) == rank
            ranks.append(rank)
            for k in hr:
                if rank <= k:
                    hr[k] += 1
                    ndcg[k] += 1 / math.log2(rank + 1)
        report = MetricsReport.from_ranks(ranks, [5, 10])
        for k in hr:
            assert report.hr[k] == pytest.approx(hr[k] / 1000)
            assert report.ndcg[k] == pytest.approx(ndcg[k] / 1000)

    def test_empty(self):
        report = MetricsReport.from_ranks([], [5])
        assert report.n == 0 and report.hr[5] == 0.0
        with pytest.raises(UsageError):
            MetricsReport.from_ranks([1], [])
