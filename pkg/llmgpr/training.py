"""The three training stages on top of the frozen base model.

1. ``ssl``: purpose prediction trains the sequencing adapters, the POI
   embeddings, and the purpose matrix.
2. ``sequencing``: next-POI prediction over every prefix of every training
   sequence trains the sequencing adapters and the POI embeddings.
3. ``aggregation``: next-POI prediction of groups, with member preferences
   pooled by the aggregation adapters and fused into the group embedding,
   trains the aggregation adapters only.

Each stage optimizes exactly its own tensors; everything else is left
untouched, which the tests verify with checksums.
"""

import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

import numpy
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm
from typing_extensions import Literal

from llmgpr.checkpoint import tensor_checksum
from llmgpr.dataset import CheckInSequence, Group
from llmgpr.errors import DivergenceError, UsageError
from llmgpr.grouprep import (
    DEFAULT_ALPHA,
    MemberEmbeddings,
    SequenceEncoder,
    aggregate_members,
    fuse,
)
from llmgpr.model import BaseModel
from llmgpr.purpose import LabeledSequence, score_purposes
from llmgpr.qlora import (
    DEFAULT_BITS,
    DEFAULT_INIT_STD,
    DEFAULT_RANK,
    AdapterSet,
    QLoRAConfig,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]
Stage = Literal["ssl", "sequencing", "aggregation"]
STAGES = ("ssl", "sequencing", "aggregation")  # type: Tuple[Stage, ...]
T = TypeVar("T")

CONVERGENCE_TOL = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by the three stages."""

    lr: float = 2e-4
    dropout: float = 0.2
    batch: int = 16
    max_epochs: int = 5
    alpha: float = DEFAULT_ALPHA
    r: int = DEFAULT_RANK
    b: int = DEFAULT_BITS
    seed: int = 0
    patience: int = 2
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    init_std: float = DEFAULT_INIT_STD

    def __post_init__(self) -> None:
        for name in ("lr", "batch", "max_epochs", "r", "b", "patience", "clip_norm"):
            if getattr(self, name) <= 0:
                raise UsageError("train.{} must be positive".format(name))
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError("train.alpha must be in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("train.dropout must be in [0, 1)")
        if self.weight_decay < 0:
            raise UsageError("train.weight_decay must not be negative")

    @property
    def qlora(self) -> QLoRAConfig:
        return QLoRAConfig(self.r, self.b, self.init_std)

    @classmethod
    def from_sections(cls, train: Any, qlora: Any) -> "TrainConfig":
        """Build from the `[train]` and `[qlora]` config sections."""
        return cls(
            lr=train.get_float("lr"),
            dropout=train.get_float("dropout"),
            batch=train.get_int("batch"),
            max_epochs=train.get_int("max_epochs"),
            alpha=train.get_float("alpha"),
            r=qlora.get_int("r"),
            b=qlora.get_int("b"),
            seed=train.get_int("seed"),
            patience=train.get_int("patience"),
            weight_decay=train.get_float("weight_decay"),
            clip_norm=train.get_float("clip_norm"),
            init_std=qlora.get_float("init_std"),
        )


@dataclass
class TrainingState:
    """Progress of one stage."""

    stage: Stage
    epoch: int = 0
    step: int = 0
    losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    best_metric: Optional[float] = None
    optimizer: Optional[torch.optim.Optimizer] = None
    last_checkpoint: Optional[str] = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise UsageError("unknown stage: {}".format(self.stage))


class MetricsLog:
    """Appends one JSON object per line to `metrics.jsonl`."""

    def __init__(self, path: Optional[PathLike] = None) -> None:
        self.path = pathlib.Path(path) if path is not None else None

    def write(self, **entry: Any) -> None:
        line = json.dumps(entry, sort_keys=True)
        logger.debug("%s", line)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(line + "\n")


# -----------------------------------------------------------------------------
# losses
# -----------------------------------------------------------------------------
def prefix_targets(sequence: CheckInSequence) -> List[Tuple[CheckInSequence, str]]:
    """Return (first j items, item j+1) for every j from 1 to M-1."""
    return [
        (sequence.slice(0, j), sequence.items[j][0]) for j in range(1, len(sequence))
    ]


def poi_loss(
    embedding: torch.Tensor, target_row: int, poi_embeddings: torch.Tensor
) -> torch.Tensor:
    """Return the cross-entropy of the full softmax over POI dot products."""
    logits = poi_embeddings @ embedding
    target = torch.as_tensor([target_row], dtype=torch.long)
    return F.cross_entropy(logits.unsqueeze(0), target)


def batch_poi_loss(
    embeddings: torch.Tensor, target_rows: Sequence[int], poi_embeddings: torch.Tensor
) -> torch.Tensor:
    """Return the mean `poi_loss` over rows of an (N, d) batch."""
    logits = embeddings @ poi_embeddings.t()
    return F.cross_entropy(logits, torch.as_tensor(target_rows, dtype=torch.long))


def purpose_loss(
    embeddings: torch.Tensor, labels: Sequence[int], purpose_matrix: torch.Tensor
) -> torch.Tensor:
    """Return the mean cross-entropy of purpose logits."""
    logits = score_purposes(purpose_matrix, embeddings)
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))


# -----------------------------------------------------------------------------
# the loop
# -----------------------------------------------------------------------------
def _check_state(state: Optional[TrainingState], stage: Stage) -> TrainingState:
    if state is None:
        return TrainingState(stage)
    if state.stage != stage:
        raise UsageError("state is for stage {}, not {}".format(state.stage, stage))
    return state


def _run_stage(
    state: TrainingState,
    params: List[nn.Parameter],
    modules: Sequence[nn.Module],
    data: Sequence[T],
    batch_loss: Callable[[List[T]], Optional[torch.Tensor]],
    config: TrainConfig,
    log: Optional[MetricsLog] = None,
    validate: Optional[Callable[[], float]] = None,
    on_epoch_end: Optional[Callable[[TrainingState], None]] = None,
    converge: bool = False,
) -> TrainingState:
    """Run mini-batch AdamW over `data`, in a seed-determined order.

    With `validate`, the stage stops after `patience` epochs without a
    better validation score and the best weights are restored. With
    `converge`, it stops once the epoch loss changes by less than
    `CONVERGENCE_TOL`.
    """
    if not data:
        raise UsageError("no training data for stage {}".format(state.stage))
    log = log or MetricsLog()
    torch.manual_seed(config.seed)
    optimizer = torch.optim.AdamW(
        params, lr=config.lr, weight_decay=config.weight_decay
    )
    state.optimizer = optimizer
    best = None  # type: Optional[List[torch.Tensor]]
    bad_epochs = 0
    for epoch in range(config.max_epochs):
        for m in modules:
            m.train()
        order = numpy.random.default_rng(config.seed + epoch).permutation(len(data))
        starts = range(0, len(order), config.batch)
        total, count = 0.0, 0
        desc = "{} {}".format(state.stage, epoch + 1)
        for start in tqdm(starts, desc=desc, disable=None, leave=False):
            batch = [data[i] for i in order[start : start + config.batch]]
            loss = batch_loss(batch)
            if loss is None:
                continue
            if not torch.isfinite(loss):
                raise DivergenceError(state.stage, state.step, state.last_checkpoint)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params, config.clip_norm)
            optimizer.step()
            state.step += 1
            state.losses.append(float(loss))
            total += float(loss)
            count += 1
            log.write(
                stage=state.stage, epoch=epoch + 1, step=state.step, loss=float(loss)
            )
        for m in modules:
            m.eval()
        state.epoch = epoch + 1
        mean = total / count if count else float("nan")
        previous = state.epoch_losses[-1] if state.epoch_losses else None
        state.epoch_losses.append(mean)
        entry = {"stage": state.stage, "epoch": state.epoch, "epoch_loss": mean}
        if validate is not None:
            with torch.no_grad():
                metric = validate()
            entry["val_hr10"] = metric
            if state.best_metric is None or metric > state.best_metric:
                state.best_metric = metric
                best = [p.detach().clone() for p in params]
                bad_epochs = 0
            else:
                bad_epochs += 1
        log.write(**entry)
        logger.info(
            "%s epoch %d/%d: loss %.4f%s",
            state.stage,
            state.epoch,
            config.max_epochs,
            mean,
            "" if validate is None else ", val HR@10 {:.4f}".format(entry["val_hr10"]),
        )
        if on_epoch_end is not None:
            on_epoch_end(state)
        if validate is not None and bad_epochs >= config.patience:
            logger.info("%s: early stop after epoch %d", state.stage, state.epoch)
            break
        if converge and previous is not None and abs(previous - mean) < CONVERGENCE_TOL:
            logger.info("%s: converged after epoch %d", state.stage, state.epoch)
            break
    if best is not None:
        with torch.no_grad():
            for p, saved in zip(params, best):
                p.copy_(saved)
    return state


def _trainable(
    adapters: Optional[AdapterSet], extra: Iterable[Optional[torch.Tensor]]
) -> List[nn.Parameter]:
    params = list(adapters.parameters()) if adapters is not None else []
    params += [t for t in extra if t is not None]
    for p in params:
        if not isinstance(p, nn.Parameter) or not p.requires_grad:
            raise UsageError("trainable tensors must be parameters with gradients")
    return params


# -----------------------------------------------------------------------------
# stages
# -----------------------------------------------------------------------------
def pretrain_ssl(
    encoder: SequenceEncoder,
    purpose_matrix: nn.Parameter,
    data: Sequence[LabeledSequence],
    config: TrainConfig,
    train_poi: bool = True,
    state: Optional[TrainingState] = None,
    log: Optional[MetricsLog] = None,
    on_epoch_end: Optional[Callable[[TrainingState], None]] = None,
) -> TrainingState:
    """Train the sequencing adapters, POI embeddings, and purpose matrix.

    Runs until the epoch loss stops changing or `max_epochs` is reached.
    """
    state = _check_state(state, "ssl")
    if encoder.adapters is None:
        raise UsageError("purpose pretraining needs sequencing adapters")
    encoder.adapters.set_dropout(config.dropout)
    poi = encoder.poi_embeddings if train_poi else None
    params = _trainable(encoder.adapters, [poi, purpose_matrix])
    fitted = [
        LabeledSequence(encoder.fit(ls.sequence), ls.label, ls.source) for ls in data
    ]

    def batch_loss(batch: List[LabeledSequence]) -> torch.Tensor:
        embeddings = torch.stack([encoder.encode(ls.sequence) for ls in batch])
        return purpose_loss(embeddings, [ls.label for ls in batch], purpose_matrix)

    return _run_stage(
        state,
        params,
        [encoder.adapters],
        fitted,
        batch_loss,
        config,
        log,
        on_epoch_end=on_epoch_end,
        converge=True,
    )


def train_sequencing(
    encoder: SequenceEncoder,
    sequences: Sequence[CheckInSequence],
    config: TrainConfig,
    score_matrix: Optional[torch.Tensor] = None,
    train_poi: bool = True,
    validate: Optional[Callable[[], float]] = None,
    state: Optional[TrainingState] = None,
    log: Optional[MetricsLog] = None,
    on_epoch_end: Optional[Callable[[TrainingState], None]] = None,
) -> TrainingState:
    """Train the sequencing adapters and POI embeddings by next-POI prediction.

    Every prefix of every sequence predicts the following POI; a batch loss
    is the mean over all its (prefix, target) pairs. Candidates are scored
    against `score_matrix`, the encoder's POI embeddings by default.
    """
    state = _check_state(state, "sequencing")
    if encoder.adapters is None:
        raise UsageError("sequencing training needs sequencing adapters")
    encoder.adapters.set_dropout(config.dropout)
    scores = encoder.poi_embeddings if score_matrix is None else score_matrix
    poi = encoder.poi_embeddings if train_poi else None
    params = _trainable(encoder.adapters, [poi])
    rows = encoder.base.vocab.poi_rows
    fitted = [encoder.fit(s) for s in sequences if len(s) >= 2]
    fitted = [s for s in fitted if len(s) >= 2]

    def batch_loss(batch: List[CheckInSequence]) -> torch.Tensor:
        embeddings = []  # type: List[torch.Tensor]
        targets = []  # type: List[int]
        for seq in batch:
            embeddings.append(encoder.encode_prefixes(seq)[:-1])
            targets.extend(rows[p] for p in seq.poi_ids[1:])
        return batch_poi_loss(torch.cat(embeddings), targets, scores)

    logger.info("Sequencing stage: %d sequences", len(fitted))
    return _run_stage(
        state,
        params,
        [encoder.adapters],
        fitted,
        batch_loss,
        config,
        log,
        validate=validate,
        on_epoch_end=on_epoch_end,
    )


@dataclass(frozen=True)
class AggregationExample:
    """A group prefix embedding, its members' embeddings, and the next POI."""

    group_id: str
    group_embedding: torch.Tensor
    member_embeddings: torch.Tensor
    target_row: int


def aggregation_examples(
    encoder: SequenceEncoder,
    members: MemberEmbeddings,
    group_sequences: Sequence[CheckInSequence],
    groups: Mapping[str, Group],
) -> List[AggregationExample]:
    """Precompute stage-3 inputs under the (now fixed) sequencing weights.

    Member embeddings cover each member's check-ins strictly before the
    target time. Groups without any member history are skipped with a
    warning.
    """
    rows = encoder.base.vocab.poi_rows
    examples = []  # type: List[AggregationExample]
    if encoder.adapters is not None:
        encoder.adapters.eval()
    for seq in group_sequences:
        group = groups.get(seq.owner_id)
        fitted = encoder.fit(seq)
        if group is None or len(fitted) < 2:
            continue
        with torch.no_grad():
            prefixes = encoder.encode_prefixes(fitted)
        kept = 0
        for j in range(len(fitted) - 1):
            target, ts = fitted.items[j + 1]
            matrix = members.matrix(group.member_ids, ts)
            if matrix is None:
                continue
            example = AggregationExample(group.id, prefixes[j], matrix, rows[target])
            examples.append(example)
            kept += 1
        if not kept:
            logger.warning("Group %s has no member sequences; skipped", group.id)
    return examples


def train_aggregation(
    base: BaseModel,
    agg_adapters: AdapterSet,
    examples: Sequence[AggregationExample],
    poi_embeddings: torch.Tensor,
    config: TrainConfig,
    validate: Optional[Callable[[], float]] = None,
    state: Optional[TrainingState] = None,
    log: Optional[MetricsLog] = None,
    on_epoch_end: Optional[Callable[[TrainingState], None]] = None,
) -> TrainingState:
    """Train the aggregation adapters on fused group embeddings."""
    state = _check_state(state, "aggregation")
    agg_adapters.set_dropout(config.dropout)
    params = _trainable(agg_adapters, [])
    frozen_poi = poi_embeddings.detach()

    def batch_loss(batch: List[AggregationExample]) -> torch.Tensor:
        fused = torch.stack(
            [
                fuse(
                    ex.group_embedding,
                    aggregate_members(base, agg_adapters, ex.member_embeddings),
                    config.alpha,
                )
                for ex in batch
            ]
        )
        return batch_poi_loss(fused, [ex.target_row for ex in batch], frozen_poi)

    logger.info(
        "Aggregation stage: %d examples, alpha %.2f", len(examples), config.alpha
    )
    return _run_stage(
        state,
        params,
        [agg_adapters],
        list(examples),
        batch_loss,
        config,
        log,
        validate=validate,
        on_epoch_end=on_epoch_end,
    )


def fresh_adapters(
    base: BaseModel, name: str, config: TrainConfig, seed_offset: int = 0
) -> AdapterSet:
    """Return zero-product adapters for every quantized layer of the base."""
    return AdapterSet.for_layers(
        name,
        base.quantized_layers(),
        config.qlora,
        seed=config.seed + seed_offset,
        dropout=config.dropout,
    )


def trainable_copy(t: torch.Tensor) -> nn.Parameter:
    """Return a detached trainable copy of a tensor."""
    return nn.Parameter(t.detach().clone())


def checksums(tensors: Mapping[str, Any]) -> Dict[str, str]:
    """Return the checksum of each named tensor or module."""
    result = {}  # type: Dict[str, str]
    for name, t in tensors.items():
        result[name] = tensor_checksum(t if isinstance(t, nn.Module) else {name: t})
    return result
