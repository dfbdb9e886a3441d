"""Ranking metrics for a single relevant item."""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from llmgpr.errors import UsageError

DEFAULT_K = (5, 10)


def _check(rank: int, k: int) -> None:
    if rank < 1 or k < 1:
        raise UsageError("rank and k must be positive")


def hr_at_k(rank: int, k: int) -> int:
    """Return 1 if the ground truth is within the top k, else 0."""
    _check(rank, k)
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    """Return ``1 / log2(rank + 1)`` within the top k, else 0."""
    _check(rank, k)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricsReport:
    """Mean HR@k and NDCG@k over evaluated sequences, with the ranks behind them."""

    k_list: List[int]
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    n: int
    ranks: List[int] = field(default_factory=list)
    sequence_ids: List[str] = field(default_factory=list)

    @classmethod
    def from_ranks(
        cls,
        ranks: Sequence[int],
        k_list: Sequence[int] = DEFAULT_K,
        sequence_ids: Optional[Sequence[str]] = None,
    ) -> "MetricsReport":
        """Average the per-sequence metrics of 1-based ground-truth ranks."""
        ks = sorted(set(int(k) for k in k_list))
        if not ks:
            raise UsageError("at least one k is required")
        n = len(ranks)
        hr = {}  # type: Dict[int, float]
        ndcg = {}  # type: Dict[int, float]
        for k in ks:
            hr[k] = sum(hr_at_k(r, k) for r in ranks) / n if n else 0.0
            ndcg[k] = sum(ndcg_at_k(r, k) for r in ranks) / n if n else 0.0
        return cls(ks, hr, ndcg, n, list(ranks), list(sequence_ids or []))

    def as_row(self, **labels: Any) -> Dict[str, Any]:
        """Return a flat row with the given labels, `n`, and every metric."""
        row = dict(labels)  # type: Dict[str, Any]
        row["n"] = self.n
        for k in self.k_list:
            row["HR@{}".format(k)] = self.hr[k]
            row["NDCG@{}".format(k)] = self.ndcg[k]
        return row

    def as_dict(self) -> Dict[str, Any]:
        """Return everything, per-sequence ranks included."""
        result = self.as_row()
        result["ranks"] = dict(zip(self.sequence_ids, self.ranks)) or self.ranks
        return result
