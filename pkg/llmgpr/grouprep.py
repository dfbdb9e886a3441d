"""Sequence encoding, candidate scoring, member aggregation, and fusion.

A check-in sequence is rendered to a prompt, run through the frozen base
model with the sequencing adapters, and averaged over positions. A group's
members are encoded the same way, passed together through the base model
with the aggregation adapters, and the pooled result is added to the group
embedding with weight ``alpha``.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy
import torch

from llmgpr.dataset import CheckInSequence, PoiTable
from llmgpr.errors import UsageError
from llmgpr.model import BaseModel
from llmgpr.qlora import AdapterSet
from llmgpr.record import RecommendationRecord
from llmgpr.vocab import SEQUENCE_HEADER, Vocabulary, encode_sequence_prompt

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.7


def fit_to_window(
    sequence: CheckInSequence,
    vocab: Vocabulary,
    max_positions: int,
    pois: Optional[PoiTable] = None,
) -> CheckInSequence:
    """Return the most recent items of `sequence` whose prompt fits the model.

    The first kept item gets zero deltas, as in any sliced sequence.
    """
    ids, ends = encode_sequence_prompt(vocab, sequence, pois)
    if len(ids) <= max_positions:
        return sequence
    # a first guess from per-item token counts, then exact checks
    header = len(vocab.encode(SEQUENCE_HEADER))
    widths = [b - a for a, b in zip([header] + ends[:-1], ends)]
    total, start = header, len(ends)
    while start > 0 and total + widths[start - 1] <= max_positions:
        total += widths[start - 1]
        start -= 1
    start = max(start - 1, 0)
    while start < len(sequence):
        fitted = sequence.slice(start)
        if len(encode_sequence_prompt(vocab, fitted, pois)[0]) <= max_positions:
            logger.debug(
                "Sequence %s truncated to its last %d items",
                sequence.sequence_id,
                len(fitted),
            )
            return fitted
        start += 1
    raise UsageError(
        "a single check-in of {} does not fit max_positions={}".format(
            sequence.sequence_id, max_positions
        )
    )


class SequenceEncoder:
    """Encoder of check-in sequences with a fixed set of weights.

    Parameters
    ----------
    base:
        The frozen base model.
    poi_embeddings:
        The POI embedding matrix, looked up for POI tokens.
    adapters:
        Sequencing adapters; `None` encodes with the frozen base alone.
    pois:
        When given, POIs are rendered by their category words instead of
        their atomic tokens.
    """

    def __init__(
        self,
        base: BaseModel,
        poi_embeddings: torch.Tensor,
        adapters: Optional[AdapterSet] = None,
        pois: Optional[PoiTable] = None,
    ) -> None:
        self.base = base
        self.poi_embeddings = poi_embeddings
        self.adapters = adapters
        self.pois = pois

    @property
    def width(self) -> int:
        return self.base.config.d

    def fit(self, sequence: CheckInSequence) -> CheckInSequence:
        """Truncate a sequence to the model window."""
        return fit_to_window(
            sequence, self.base.vocab, self.base.config.max_positions, self.pois
        )

    def _states(self, sequence: CheckInSequence) -> Tuple[torch.Tensor, List[int]]:
        if not len(sequence):
            raise UsageError("cannot encode an empty sequence")
        ids, ends = encode_sequence_prompt(self.base.vocab, sequence, self.pois)
        states = self.base(ids, self.adapters, self.poi_embeddings)
        return states, ends

    def encode(self, sequence: CheckInSequence) -> torch.Tensor:
        """Return the mean final-layer state of the sequence prompt, width d."""
        states, _ = self._states(sequence)
        return states.mean(dim=0)

    def encode_prefixes(self, sequence: CheckInSequence) -> torch.Tensor:
        """Return an (M, d) matrix whose row j encodes the first j+1 items.

        The prompt of a prefix is a token prefix of the full prompt, so one
        causal pass and running means give every row.
        """
        states, ends = self._states(sequence)
        cumulative = states.cumsum(dim=0)
        index = torch.as_tensor([e - 1 for e in ends], dtype=torch.long)
        counts = torch.as_tensor(ends, dtype=states.dtype).unsqueeze(1)
        return cumulative[index] / counts


def encode_sequence(
    base: BaseModel,
    seq_adapter: Optional[AdapterSet],
    sequence: CheckInSequence,
    poi_embeddings: torch.Tensor,
) -> torch.Tensor:
    """Return the embedding of a sequence whose prompt fits the model."""
    return SequenceEncoder(base, poi_embeddings, seq_adapter).encode(sequence)


# -----------------------------------------------------------------------------
# scoring
# -----------------------------------------------------------------------------
@dataclass
class ScoreVector:
    """Logits and softmax probabilities of candidate POIs."""

    poi_ids: List[str]
    logits: numpy.ndarray
    probabilities: numpy.ndarray

    def order(self) -> numpy.ndarray:
        """Return candidate indices by descending score, ties by ascending POI id."""
        id_rank = numpy.argsort(numpy.argsort(numpy.array(self.poi_ids), kind="stable"))
        return numpy.lexsort((id_rank, -self.logits))

    def ranking(self) -> List[str]:
        """Return the POI ids best first."""
        return [self.poi_ids[i] for i in self.order()]

    def rank_of(self, poi_id: str) -> int:
        """Return the 1-based rank of a candidate."""
        try:
            return self.ranking().index(poi_id) + 1
        except ValueError:
            raise UsageError("{} is not a candidate".format(poi_id)) from None

    def top(self, k: int) -> List[Tuple[str, float]]:
        """Return the best k (poi_id, probability) pairs."""
        return [
            (self.poi_ids[i], float(self.probabilities[i])) for i in self.order()[:k]
        ]


def score_candidates(
    embedding: torch.Tensor,
    candidate_embeddings: torch.Tensor,
    candidate_ids: Optional[Sequence[str]] = None,
) -> ScoreVector:
    """Return the softmax over dot products of candidate rows with an embedding."""
    if candidate_embeddings.dim() != 2 or candidate_embeddings.shape[0] == 0:
        raise UsageError("no candidates to score")
    if candidate_embeddings.shape[1] != embedding.shape[-1]:
        raise UsageError("candidate rows and embedding differ in width")
    if candidate_ids is None:
        candidate_ids = [str(i) for i in range(candidate_embeddings.shape[0])]
    if len(candidate_ids) != candidate_embeddings.shape[0]:
        raise UsageError("one id per candidate row is required")
    with torch.no_grad():
        logits = candidate_embeddings.to(torch.float64) @ embedding.to(torch.float64)
        probabilities = torch.softmax(logits, dim=0)
    return ScoreVector(
        list(candidate_ids), logits.cpu().numpy(), probabilities.cpu().numpy()
    )


# -----------------------------------------------------------------------------
# aggregation
# -----------------------------------------------------------------------------
def _check_members(member_embeddings: torch.Tensor, d: int) -> None:
    if member_embeddings.dim() != 2 or member_embeddings.shape[0] == 0:
        raise UsageError("aggregation needs a (K, d) matrix with K >= 1")
    if member_embeddings.shape[1] != d:
        raise UsageError(
            "member embeddings have width {}, expected {}".format(
                member_embeddings.shape[1], d
            )
        )


def aggregate_members(
    base: BaseModel, agg_adapter: Optional[AdapterSet], member_embeddings: torch.Tensor
) -> torch.Tensor:
    """Pool member embeddings through the base model with the aggregation adapters.

    The K embeddings enter the first decoder layer directly, without word or
    position embeddings, and attend to each other without a causal mask; the
    output is the mean of the K final states and does not depend on the
    member order.
    """
    _check_members(member_embeddings, base.config.d)
    x = member_embeddings.to(base.ln_f.weight.dtype).unsqueeze(0)
    return base.run_layers(x, agg_adapter, causal=False)[0].mean(dim=0)


def mean_aggregate(member_embeddings: torch.Tensor) -> torch.Tensor:
    """Return the plain member average."""
    _check_members(member_embeddings, member_embeddings.shape[-1])
    return member_embeddings.mean(dim=0)


def fuse(
    group_embedding: torch.Tensor, aggregated: torch.Tensor, alpha: float
) -> torch.Tensor:
    """Return ``group_embedding + alpha * aggregated``."""
    if group_embedding.shape != aggregated.shape:
        raise UsageError("cannot fuse embeddings of different shapes")
    return group_embedding + alpha * aggregated


class MemberEmbeddings:
    """Per-member history embeddings under fixed sequencing weights.

    Each member's whole sequence is encoded once; the embedding of the
    history before a time is the matching prefix row. Histories that start
    before the model window are encoded on their own.
    """

    def __init__(
        self, encoder: SequenceEncoder, sequences: Mapping[str, CheckInSequence]
    ) -> None:
        self.encoder = encoder
        self.sequences = dict(sequences)
        self._cache = {}  # type: Dict[str, Tuple[int, torch.Tensor]]

    def _prefixes(self, user_id: str) -> Tuple[int, torch.Tensor]:
        if user_id not in self._cache:
            seq = self.sequences[user_id]
            fitted = self.encoder.fit(seq)
            with torch.no_grad():
                rows = self.encoder.encode_prefixes(fitted)
            self._cache[user_id] = (len(seq) - len(fitted), rows)
        return self._cache[user_id]

    def before(self, user_id: str, timestamp: int) -> Optional[torch.Tensor]:
        """Return the embedding of a member's check-ins strictly before a time."""
        seq = self.sequences.get(user_id)
        if seq is None:
            return None
        k = sum(1 for t in seq.timestamps if t < timestamp)
        if k == 0:
            return None
        offset, rows = self._prefixes(user_id)
        if k - 1 >= offset:
            return rows[k - 1 - offset]
        history = self.encoder.fit(seq.slice(0, k))
        with torch.no_grad():
            return self.encoder.encode(history)

    def matrix(
        self, member_ids: Sequence[str], timestamp: int
    ) -> Optional[torch.Tensor]:
        """Return the (K, d) stack of available member embeddings, or None."""
        rows = [self.before(u, timestamp) for u in member_ids]
        kept = [r for r in rows if r is not None]
        return torch.stack(kept) if kept else None


def recommend(
    owner_id: str, scores: ScoreVector, top: int = 10
) -> List[RecommendationRecord]:
    """Return the best `top` candidates of an owner as output rows."""
    if top < 1:
        raise UsageError("top must be positive")
    return [
        RecommendationRecord(owner_id, rank, poi_id, probability)
        for rank, (poi_id, probability) in enumerate(scores.top(top), start=1)
    ]
