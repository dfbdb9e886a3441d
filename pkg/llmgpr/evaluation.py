"""Leave-one-out ranking evaluation, ablation variants, cold start, and sweeps."""

import logging
from dataclasses import dataclass, fields
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
)

import numpy
import torch
from typing_extensions import Literal

from llmgpr.corpus import DEFAULT_CANDIDATES, candidate_set, with_target
from llmgpr.dataset import CheckInSequence, EvalCase, Group, OwnerKind, PoiTable
from llmgpr.dumper import tsv_rows
from llmgpr.errors import UsageError
from llmgpr.grouprep import (
    DEFAULT_ALPHA,
    MemberEmbeddings,
    SequenceEncoder,
    aggregate_members,
    fuse,
    mean_aggregate,
    score_candidates,
)
from llmgpr.metrics import DEFAULT_K, MetricsReport
from llmgpr.model import BaseModel
from llmgpr.qlora import AdapterSet

logger = logging.getLogger(__name__)

SweepParam = Literal["r", "alpha"]
CaseEmbedder = Callable[[EvalCase], torch.Tensor]
V = TypeVar("V")

MODEL_NAME = "LLMGPR"
FLAG_KEYS = {
    "seq": "use_sequencing_adapter",
    "tokens": "use_extended_poi_tokens",
    "fusion": "use_aggregation_fusion",
    "ssl": "use_ssl_pretraining",
    "avg": "mean_aggregation",
}
ON_OFF = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}


@dataclass(frozen=True)
class AblationFlags:
    """Components switched on or off to obtain the degraded variants.

    With the sequencing adapter off, nothing is fine-tuned: sequences are
    encoded by the frozen base and members are pooled without aggregation
    adapters. With the POI tokens off, POIs are described by their category
    words and candidates are scored against the initial POI embeddings.
    """

    use_sequencing_adapter: bool = True
    use_extended_poi_tokens: bool = True
    use_aggregation_fusion: bool = True
    use_ssl_pretraining: bool = True
    mean_aggregation: bool = False

    @classmethod
    def parse(cls, text: str) -> "AblationFlags":
        """Parse ``key=on|off`` pairs separated by commas; keys as in `FLAG_KEYS`."""
        values = {}  # type: Dict[str, bool]
        for item in (t.strip() for t in text.split(",")):
            if not item:
                continue
            key, sep, value = item.partition("=")
            key = key.strip().lower()
            name = FLAG_KEYS.get(key, key)
            if not sep or name not in FLAG_KEYS.values():
                raise UsageError(
                    "flags must look like key=on|off with key in {}: {}".format(
                        ", ".join(FLAG_KEYS), item
                    )
                )
            if value.strip().lower() not in ON_OFF:
                raise UsageError("flag value must be on or off: {}".format(item))
            values[name] = ON_OFF[value.strip().lower()]
        return cls(**values)

    def __str__(self) -> str:
        short = {v: k for k, v in FLAG_KEYS.items()}
        default = AblationFlags()
        return ",".join(
            "{}={}".format(short[f.name], "on" if getattr(self, f.name) else "off")
            for f in fields(self)
            if getattr(self, f.name) != getattr(default, f.name)
        )

    @property
    def variant(self) -> str:
        """Return the variant name of the flag combination."""
        if not self.use_extended_poi_tokens:
            return MODEL_NAME + ("-M" if self.use_sequencing_adapter else "-FT")
        if self == AblationFlags():
            return MODEL_NAME
        if self == AblationFlags(use_aggregation_fusion=False):
            return MODEL_NAME + "-ER"
        if self == AblationFlags(use_ssl_pretraining=False):
            return MODEL_NAME + "-SSL"
        if self == AblationFlags(mean_aggregation=True):
            return MODEL_NAME + "-AVG"
        return "{}[{}]".format(MODEL_NAME, self)

    # checkpoint tags: variants sharing a stage share its checkpoint
    def ssl_tag(self) -> str:
        return "ssl" + ("" if self.use_extended_poi_tokens else "-notok")

    def seq_tag(self) -> str:
        tag = "seq"
        if not self.use_ssl_pretraining:
            tag += "-nossl"
        if not self.use_extended_poi_tokens:
            tag += "-notok"
        return tag

    def agg_tag(self, alpha: float) -> str:
        return "agg-{}-alpha{:g}".format(self.seq_tag(), alpha)

    @property
    def trains_aggregation(self) -> bool:
        """Return whether the aggregation adapters are trained and used."""
        return (
            self.use_sequencing_adapter
            and self.use_aggregation_fusion
            and not self.mean_aggregation
        )


@dataclass(frozen=True)
class EvalConfig:
    """Settings of the `[eval]` section."""

    k_list: Tuple[int, ...] = DEFAULT_K
    flags: str = ""
    cold_start_n: int = 200
    cold_start_fraction: float = 0.1
    cold_start_max_checkins: int = 10
    top: int = 10
    sweep_alpha: Tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
    sweep_r: Tuple[int, ...] = (4, 8, 16, 32, 64)

    def __post_init__(self) -> None:
        if not self.k_list or min(self.k_list) < 1:
            raise UsageError("eval.k needs positive values")
        if not 0.0 <= self.cold_start_fraction <= 1.0:
            raise UsageError("eval.cold_start_fraction must be in [0, 1]")

    @classmethod
    def from_section(cls, section: Any) -> "EvalConfig":
        """Build from an `[eval]` config section."""
        return cls(
            k_list=tuple(section.get_ints("k")),
            flags=section.get_str("flags"),
            cold_start_n=section.get_int("cold_start_n"),
            cold_start_fraction=section.get_float("cold_start_fraction"),
            cold_start_max_checkins=section.get_int("cold_start_max_checkins"),
            top=section.get_int("top"),
            sweep_alpha=tuple(section.get_floats("sweep_alpha")),
            sweep_r=tuple(section.get_ints("sweep_r")),
        )


# -----------------------------------------------------------------------------
# model bundle
# -----------------------------------------------------------------------------
@dataclass
class ModelBundle:
    """Everything a variant needs to embed and score evaluation cases.

    `score_matrix` holds the candidate rows (trained POI embeddings, or the
    initial ones when POI tokens are off); `pois` is set when POIs are
    rendered by category.
    """

    base: BaseModel
    score_matrix: torch.Tensor
    flags: AblationFlags = AblationFlags()
    seq_adapters: Optional[AdapterSet] = None
    agg_adapters: Optional[AdapterSet] = None
    pois: Optional[PoiTable] = None
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        f = self.flags
        if f.use_sequencing_adapter and self.seq_adapters is None:
            raise UsageError(
                "variant {} needs trained sequencing adapters".format(f.variant)
            )
        if f.trains_aggregation and self.agg_adapters is None:
            raise UsageError(
                "variant {} needs trained aggregation adapters".format(f.variant)
            )
        if not f.use_extended_poi_tokens and self.pois is None:
            raise UsageError("category rendering needs the POI table")

    def encoder(self) -> SequenceEncoder:
        """Return the sequence encoder of the variant."""
        adapters = self.seq_adapters if self.flags.use_sequencing_adapter else None
        pois = None if self.flags.use_extended_poi_tokens else self.pois
        return SequenceEncoder(self.base, self.score_matrix, adapters, pois)

    def pool(self, members: torch.Tensor) -> torch.Tensor:
        """Pool a (K, d) member matrix the way the variant does."""
        if self.flags.mean_aggregation:
            return mean_aggregate(members)
        adapters = self.agg_adapters if self.flags.trains_aggregation else None
        return aggregate_members(self.base, adapters, members)

    def embedder(
        self,
        member_sequences: Optional[Mapping[str, CheckInSequence]] = None,
        groups: Optional[Mapping[str, Group]] = None,
    ) -> CaseEmbedder:
        """Return a function embedding the prefix of an evaluation case.

        Group prefixes are fused with their pooled member histories before
        the target time when fusion is on.
        """
        encoder = self.encoder()
        members = MemberEmbeddings(encoder, member_sequences or {})
        groups = groups or {}

        def embed(case: EvalCase) -> torch.Tensor:
            e = encoder.encode(encoder.fit(case.prefix))
            group = groups.get(case.prefix.owner_id)
            if (
                case.prefix.owner_kind != "group"
                or group is None
                or not self.flags.use_aggregation_fusion
            ):
                return e
            matrix = members.matrix(group.member_ids, case.target_timestamp)
            if matrix is None:
                logger.debug("No member history for %s", case.sequence_id)
                return e
            return fuse(e, self.pool(matrix), self.alpha)

        return embed


# -----------------------------------------------------------------------------
# evaluation
# -----------------------------------------------------------------------------
def case_candidates(
    case: EvalCase, pois: PoiTable, h: int = DEFAULT_CANDIDATES
) -> List[str]:
    """Return the nearest unvisited POIs to the last prefix item, plus the target."""
    anchor = case.prefix.items[-1][0]
    nearest = candidate_set(pois, anchor, case.prefix.poi_ids, h)
    return with_target(nearest, case.target)


def rank_cases(
    cases: Sequence[EvalCase],
    embed: CaseEmbedder,
    score_matrix: torch.Tensor,
    poi_rows: Mapping[str, int],
    pois: PoiTable,
    k_list: Sequence[int] = DEFAULT_K,
    h: int = DEFAULT_CANDIDATES,
) -> MetricsReport:
    """Rank the target of every case among its candidates and average."""
    ranks = []  # type: List[int]
    ids = []  # type: List[str]
    with torch.no_grad():
        for case in cases:
            candidates = case_candidates(case, pois, h)
            rows = torch.as_tensor([poi_rows[c] for c in candidates], dtype=torch.long)
            scores = score_candidates(embed(case), score_matrix[rows], candidates)
            ranks.append(scores.rank_of(case.target))
            ids.append(case.sequence_id)
    return MetricsReport.from_ranks(ranks, k_list, ids)


def evaluate(
    bundle: ModelBundle,
    cases: Sequence[EvalCase],
    pois: PoiTable,
    member_sequences: Optional[Mapping[str, CheckInSequence]] = None,
    groups: Optional[Mapping[str, Group]] = None,
    k_list: Sequence[int] = DEFAULT_K,
    h: int = DEFAULT_CANDIDATES,
    owner_kind: Optional[OwnerKind] = "group",
) -> MetricsReport:
    """Evaluate a variant on the cases of one owner kind (all when None)."""
    if owner_kind is not None:
        cases = [c for c in cases if c.prefix.owner_kind == owner_kind]
    for adapters in (bundle.seq_adapters, bundle.agg_adapters):
        if adapters is not None:
            adapters.eval()
    report = rank_cases(
        cases,
        bundle.embedder(member_sequences, groups),
        bundle.score_matrix,
        bundle.base.vocab.poi_rows,
        pois,
        k_list,
        h,
    )
    logger.info(
        "%s on %d %s cases: %s",
        bundle.flags.variant,
        report.n,
        owner_kind or "all",
        ", ".join("HR@{} {:.4f}".format(k, report.hr[k]) for k in report.k_list),
    )
    return report


# -----------------------------------------------------------------------------
# cold start
# -----------------------------------------------------------------------------
def cold_start_size(
    n_qualifying: int, cap: int = 200, fraction: float = 0.1
) -> int:
    """Return how many sequences to hold out: ``min(cap, fraction * n)``."""
    return min(cap, int(fraction * n_qualifying))


def qualifying_cold_start(
    group_sequences: Sequence[CheckInSequence], max_checkins: int = 10
) -> List[CheckInSequence]:
    """Return sequences short enough for cold start and long enough to evaluate."""
    return [s for s in group_sequences if 3 <= len(s) < max_checkins]


def cold_start_split(
    group_sequences: Sequence[CheckInSequence],
    n: int,
    max_checkins: int = 10,
    seed: int = 0,
) -> Tuple[FrozenSet[str], List[CheckInSequence]]:
    """Draw `n` short group sequences to hold out from training.

    Returns the held-out sequence ids and the remaining sequences.
    """
    if n < 0:
        raise UsageError("cold-start size must not be negative")
    if n == 0:
        return frozenset(), list(group_sequences)
    qualifying = qualifying_cold_start(group_sequences, max_checkins)
    if len(qualifying) < n:
        raise UsageError(
            "cold start needs {} sequences with 3 to {} check-ins; found {}".format(
                n, max_checkins - 1, len(qualifying)
            )
        )
    rng = numpy.random.default_rng(seed)
    picked = rng.choice(len(qualifying), size=n, replace=False)
    held = frozenset(qualifying[i].sequence_id for i in picked)
    remainder = [s for s in group_sequences if s.sequence_id not in held]
    logger.info(
        "Cold start: %d of %d qualifying sequences held out", n, len(qualifying)
    )
    return held, remainder


def cold_start_report(
    cold: MetricsReport, normal: MetricsReport
) -> Dict[str, Any]:
    """Return both reports and the relative drop of each metric."""
    drop = {}  # type: Dict[str, float]
    for name, c, n in (
        [("HR@{}".format(k), cold.hr[k], normal.hr[k]) for k in cold.k_list]
        + [("NDCG@{}".format(k), cold.ndcg[k], normal.ndcg[k]) for k in cold.k_list]
    ):
        drop[name] = (n - c) / n if n else 0.0
    return {"cold_start": cold.as_dict(), "normal": normal.as_dict(), "drop": drop}


# -----------------------------------------------------------------------------
# sweeps
# -----------------------------------------------------------------------------
def sweep(
    param: SweepParam,
    values: Sequence[V],
    train_and_eval: Callable[[V], MetricsReport],
) -> List[Tuple[V, MetricsReport]]:
    """Train and evaluate once per value of `param`."""
    if param not in ("r", "alpha"):
        raise UsageError("sweep parameter must be r or alpha")
    if not values:
        raise UsageError("sweep needs at least one value")
    results = []  # type: List[Tuple[V, MetricsReport]]
    for v in values:
        logger.info("Sweep %s = %s", param, v)
        results.append((v, train_and_eval(v)))
    return results


def sweep_table(param: str, results: Sequence[Tuple[Any, MetricsReport]]) -> str:
    """Return the sweep results as TSV: one row per value."""
    if not results:
        return tsv_rows([param], [])
    ks = results[0][1].k_list
    header = [param, "n"]
    for k in ks:
        header += ["HR@{}".format(k), "NDCG@{}".format(k)]
    rows = []
    for v, report in results:
        row = [v, report.n]  # type: List[Any]
        for k in ks:
            row += ["{:.4f}".format(report.hr[k]), "{:.4f}".format(report.ndcg[k])]
        rows.append(row)
    return tsv_rows(header, rows)
