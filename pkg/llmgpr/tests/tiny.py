"""Tiny corpora and models shared by the tests."""

from typing import Iterable, Sequence

from llmgpr.dataset import CheckInSequence, OwnerKind, Poi, PoiTable
from llmgpr.model import BaseModel, ModelConfig, pretrain_base
from llmgpr.vocab import build_vocab, render_poi_prompt, render_sequence_prompt

T0 = 1262304000  # 2010-01-01 00:00 UTC (a Friday)
HOUR = 3600
CATEGORIES = ["Cafe", "Restaurant", "Museum", "Office", "Residence", "Gym"]

TINY_MODEL = ModelConfig(
    d=8,
    n_layers=2,
    n_heads=2,
    ff_width=16,
    max_positions=512,
    dropout=0.0,
    min_freq=1,
    pretrain_epochs=1,
    pretrain_batch=8,
)


def tiny_pois(n: int = 12) -> PoiTable:
    """Return n POIs on a 4-column grid of 0.01 degree cells."""
    return PoiTable(
        Poi(
            "p{:02d}".format(i),
            "Place {}".format(i),
            CATEGORIES[i % len(CATEGORIES)],
            round(0.01 * (i // 4), 2),
            round(0.01 * (i % 4), 2),
        )
        for i in range(n)
    )


def tiny_sequence(
    owner_id: str,
    poi_ids: Sequence[str],
    pois: PoiTable,
    kind: OwnerKind = "user",
    start: int = T0,
    step: int = HOUR,
) -> CheckInSequence:
    """Return a sequence visiting `poi_ids` every `step` seconds."""
    items = [(p, start + i * step) for i, p in enumerate(poi_ids)]
    return CheckInSequence.from_items(owner_id, kind, items, pois)


def tiny_base(
    pois: PoiTable, sequences: Iterable[CheckInSequence] = (), seed: int = 0
) -> BaseModel:
    """Pretrain and freeze a tiny base model on POI and sequence prompts."""
    prompts = [render_poi_prompt(p) for p in pois.values()]
    prompts += [render_sequence_prompt(s) for s in sequences]
    vocab = build_vocab(pois, prompts, TINY_MODEL.min_freq)
    return pretrain_base(prompts, vocab, TINY_MODEL, seed=seed)
