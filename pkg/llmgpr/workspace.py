"""Run directories: the on-disk state shared by the pipeline commands.

A run directory holds::

    data/               checkins.tsv, pois.tsv, social.tsv, groups.tsv,
                        group_checkins.tsv, stats.json
    checkpoints/        base/, poi-init/, and r<r>/<stage tag>/
    labels.tsv          purpose labels
    metrics.jsonl       training losses and validation scores
    report.json         full evaluation report
    report.tsv          one row per variant, owner kind, and split
    run_manifest.json   input hashes and resolved configuration per command

Each command checks that the stages it depends on have produced their
checkpoints and reuses its own existing checkpoint unless forced.
"""

import datetime
import hashlib
import json
import logging
import os
import pathlib
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Union

import torch

from llmgpr.checkpoint import (
    MANIFEST,
    Checkpoint,
    load_base,
    load_checkpoint,
    save_base,
    save_checkpoint,
)
from llmgpr.config import Config
from llmgpr.corpus import (
    DataConfig,
    DatasetStats,
    build_sequences,
    candidate_set,
    dataset_stats,
    filter_sparse,
    load_groups,
    make_split,
    mine_groups,
    split_by_gap,
    write_dataset,
    write_groups,
)
from llmgpr.dataset import (
    OWNER_KINDS,
    CheckInSequence,
    CheckInTable,
    DatasetSplit,
    EvalCase,
    Group,
    PoiTable,
    SocialGraph,
)
from llmgpr.dumper import (
    JSONDumper,
    ReportFormat,
    TSVDumper,
    dumper_for,
    write_records,
)
from llmgpr.errors import UsageError
from llmgpr.evaluation import (
    AblationFlags,
    EvalConfig,
    ModelBundle,
    SweepParam,
    cold_start_report,
    cold_start_size,
    cold_start_split,
    evaluate,
    qualifying_cold_start,
    rank_cases,
    sweep,
    sweep_table,
)
from llmgpr.grouprep import (
    MemberEmbeddings,
    SequenceEncoder,
    recommend,
    score_candidates,
)
from llmgpr.metrics import MetricsReport
from llmgpr.model import BaseModel, ModelConfig, init_poi_embeddings, pretrain_base
from llmgpr.parser import load_dataset
from llmgpr.purpose import (
    LabeledSequence,
    SSLConfig,
    label_histogram,
    label_sequences,
    init_purpose_matrix,
)
from llmgpr.synthetic import SyntheticConfig, generate_synthetic
from llmgpr.training import (
    MetricsLog,
    TrainConfig,
    TrainingState,
    aggregation_examples,
    checksums,
    fresh_adapters,
    pretrain_ssl,
    train_aggregation,
    train_sequencing,
    trainable_copy,
)
from llmgpr.vocab import build_vocab, render_poi_prompt, render_sequence_prompt

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

RUN_DIR_VARIABLE = "LLMGPR_RUN_DIR"
DATA_FILES = ("checkins.tsv", "pois.tsv", "social.tsv")
GROUP_FILES = ("groups.tsv", "group_checkins.tsv")
RUN_MANIFEST = "run_manifest.json"
BASE_TAG = "base"
POI_INIT_TAG = "poi-init"


def default_run_dir() -> pathlib.Path:
    """Return `$LLMGPR_RUN_DIR`, or ``runs/<UTC timestamp>``."""
    env = os.environ.get(RUN_DIR_VARIABLE)
    if env:
        return pathlib.Path(env)
    now = datetime.datetime.now(datetime.timezone.utc)
    return pathlib.Path("runs") / now.strftime("%Y%m%d-%H%M%S")


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(str(path), "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Corpus:
    """The loaded dataset with its sequences and leave-one-out split."""

    checkins: CheckInTable
    pois: PoiTable
    social: SocialGraph
    groups: Dict[str, Group]
    group_checkins: CheckInTable
    user_sequences: List[CheckInSequence]
    group_sequences: List[CheckInSequence]
    split: DatasetSplit

    @property
    def members(self) -> Dict[str, CheckInSequence]:
        """Return the full check-in sequence of each user."""
        return {s.owner_id: s for s in self.user_sequences}


class Workspace:
    """Pipeline commands operating on one run directory.

    Parameters
    ----------
    path:
        The run directory; created on demand.
    config:
        The effective configuration.
    force:
        Recompute stages whose checkpoints already exist.
    """

    def __init__(self, path: PathLike, config: Config, force: bool = False) -> None:
        self.path = pathlib.Path(path)
        self.config = config
        self.force = force
        self._corpus = None  # type: Optional[Corpus]
        self._base = None  # type: Optional[BaseModel]

    # ------------------------------------------------------------------ paths
    @property
    def data_dir(self) -> pathlib.Path:
        return self.path / "data"

    @property
    def labels_path(self) -> pathlib.Path:
        return self.path / "labels.tsv"

    @property
    def metrics_log(self) -> MetricsLog:
        self.path.mkdir(parents=True, exist_ok=True)
        return MetricsLog(self.path / "metrics.jsonl")

    def checkpoint_dir(self, tag: str) -> pathlib.Path:
        """Return the directory of a checkpoint tag.

        The base model and the initial POI embeddings are shared by all
        adapter ranks; adapter checkpoints live under ``r<r>/``.
        """
        root = self.path / "checkpoints"
        if tag in (BASE_TAG, POI_INIT_TAG):
            return root / tag
        return root / "r{}".format(self.train_config.r) / tag

    # ----------------------------------------------------------------- config
    @property
    def data_config(self) -> DataConfig:
        return DataConfig.from_section(self.config["data"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_section(self.config["model"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_sections(self.config["train"], self.config["qlora"])

    @property
    def ssl_config(self) -> SSLConfig:
        return SSLConfig.from_section(self.config["ssl"])

    @property
    def eval_config(self) -> EvalConfig:
        return EvalConfig.from_section(self.config["eval"])

    @property
    def seed(self) -> int:
        return self.train_config.seed

    # --------------------------------------------------------------- manifest
    def record(self, command: str, inputs: Iterable[PathLike] = ()) -> None:
        """Write the input hashes and the resolved configuration of a command."""
        path = self.path / RUN_MANIFEST
        manifest = {}  # type: Dict[str, Any]
        if path.is_file():
            manifest = json.loads(path.read_text(encoding="utf-8"))
        hashes = {}  # type: Dict[str, str]
        for p in inputs:
            p = pathlib.Path(p)
            if p.is_file():
                try:
                    key = str(p.resolve().relative_to(self.path.resolve()))
                except ValueError:
                    key = str(p)
                hashes[key] = file_sha256(p)
        manifest[command] = {"inputs": hashes, "config": self.config.resolved()}
        self.path.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def _data_inputs(self) -> List[pathlib.Path]:
        return [self.data_dir / n for n in DATA_FILES + GROUP_FILES]

    def _checkpoint_inputs(self, *tags: str) -> List[pathlib.Path]:
        return [self.checkpoint_dir(t) / MANIFEST for t in tags]

    # ------------------------------------------------------------ checkpoints
    def is_complete(self, tag: str) -> bool:
        """Return whether a stage has finished writing its checkpoint."""
        path = self.checkpoint_dir(tag) / MANIFEST
        if not path.is_file():
            return False
        meta = json.loads(path.read_text(encoding="utf-8")).get("meta", {})
        return bool(meta.get("complete", False))

    def _reuse(self, tag: str) -> bool:
        if self.is_complete(tag) and not self.force:
            logger.info("Reusing checkpoint %s", self.checkpoint_dir(tag))
            return True
        return False

    def require(self, tag: str, producer: str) -> Checkpoint:
        """Load a finished checkpoint, or fail naming the command producing it."""
        if not self.is_complete(tag):
            raise UsageError(
                "checkpoint {} is missing; run `{}` first".format(
                    self.checkpoint_dir(tag), producer
                )
            )
        return load_checkpoint(self.checkpoint_dir(tag))

    def _save(
        self,
        tag: str,
        tensors: Dict[str, torch.Tensor],
        adapters: Sequence[Any] = (),
        complete: bool = True,
        **meta: Any,
    ) -> pathlib.Path:
        meta["complete"] = complete
        named = dict(tensors)  # type: Dict[str, Any]
        named.update({a.name: a for a in adapters})
        meta["checksums"] = checksums(named)
        return save_checkpoint(self.checkpoint_dir(tag), tensors, meta, adapters)

    def _epoch_saver(
        self,
        tag: str,
        tensors: Callable[[], Dict[str, torch.Tensor]],
        adapters: Sequence[Any],
        flags: AblationFlags,
    ) -> Callable[[TrainingState], None]:
        def save(state: TrainingState) -> None:
            path = self._save(
                tag,
                tensors(),
                adapters,
                complete=False,
                stage=state.stage,
                epoch=state.epoch,
                flags=str(flags),
            )
            state.last_checkpoint = str(path)

        return save

    # ------------------------------------------------------------------- data
    def synth(self, seed: Optional[int] = None) -> None:
        """Generate a synthetic dataset into ``data/``."""
        seed = self.seed if seed is None else seed
        config = SyntheticConfig.from_section(self.config["data"])
        checkins, pois, social = generate_synthetic(config, seed)
        write_dataset(self.data_dir, checkins, pois, social)
        self._corpus = None
        self.record("synth")

    def ingest(
        self, checkins_path: PathLike, pois_path: PathLike, social_path: PathLike
    ) -> None:
        """Load, filter, and copy a dataset into ``data/``."""
        checkins, pois, social = load_dataset(checkins_path, pois_path, social_path)
        checkins, pois = filter_sparse(
            checkins, pois, self.data_config.min_interactions
        )
        write_dataset(self.data_dir, checkins, pois, social)
        self._corpus = None
        self.record("ingest", [checkins_path, pois_path, social_path])

    def _load_user_data(self) -> Any:
        if not all((self.data_dir / n).is_file() for n in DATA_FILES):
            raise UsageError(
                "no dataset in {}; run `ingest` or `synth` first".format(self.data_dir)
            )
        return load_dataset(*(self.data_dir / n for n in DATA_FILES))

    def mine_groups(self) -> List[Group]:
        """Mine groups and their check-ins from the user data."""
        checkins, _, social = self._load_user_data()
        groups, group_checkins = mine_groups(
            checkins, social, self.data_config.window_seconds
        )
        write_groups(self.data_dir, groups, group_checkins)
        self._corpus = None
        self.record("mine-groups", [self.data_dir / n for n in DATA_FILES])
        return groups

    @property
    def corpus(self) -> Corpus:
        """Return the dataset of the run, loaded once."""
        if self._corpus is None:
            self._corpus = self._load_corpus()
        return self._corpus

    def _load_corpus(self) -> Corpus:
        checkins, pois, social = self._load_user_data()
        if not all((self.data_dir / n).is_file() for n in GROUP_FILES):
            raise UsageError(
                "no groups in {}; run `mine-groups` first".format(self.data_dir)
            )
        groups, group_checkins = load_groups(self.data_dir, pois)
        max_len = self.data_config.max_len
        user_sequences = build_sequences(checkins, pois, max_len)
        group_sequences = build_sequences(group_checkins, pois, max_len)
        ec = self.eval_config
        qualifying = qualifying_cold_start(group_sequences, ec.cold_start_max_checkins)
        n = cold_start_size(len(qualifying), ec.cold_start_n, ec.cold_start_fraction)
        held, _ = cold_start_split(
            group_sequences, n, ec.cold_start_max_checkins, self.seed
        )
        split = make_split(user_sequences + group_sequences, held)
        return Corpus(
            checkins,
            pois,
            social,
            {g.id: g for g in groups},
            group_checkins,
            user_sequences,
            group_sequences,
            split,
        )

    def stats(self) -> DatasetStats:
        """Compute the dataset statistics and write ``data/stats.json``."""
        c = self.corpus
        result = dataset_stats(
            c.checkins, list(c.groups.values()), c.group_checkins, c.pois
        )
        JSONDumper().dump_file(result.as_dict(), self.data_dir / "stats.json")
        self.record("stats", self._data_inputs())
        return result

    # ------------------------------------------------------------------ model
    def pretraining_corpus(self) -> List[str]:
        """Return POI prompts and prompts of the training sequences.

        Sequences are rendered both with POI tokens and with category words.
        """
        c = self.corpus
        prompts = [render_poi_prompt(p) for p in c.pois.values()]
        for s in c.split.train:
            prompts.append(render_sequence_prompt(s))
            prompts.append(render_sequence_prompt(s, c.pois))
        return prompts

    def pretrain_base(self) -> None:
        """Build the vocabulary, pretrain the base model, quantize and freeze it."""
        if self._reuse(BASE_TAG):
            return
        model = self.model_config
        prompts = self.pretraining_corpus()
        vocab = build_vocab(self.corpus.pois, prompts, model.min_freq)
        base = pretrain_base(prompts, vocab, model, self.seed, self.train_config.b)
        save_base(self.checkpoint_dir(BASE_TAG), base)
        self._base = base
        self.record("pretrain-base", self._data_inputs())

    @property
    def base(self) -> BaseModel:
        """Return the frozen base model of the run."""
        if self._base is None:
            if not self.is_complete(BASE_TAG):
                raise UsageError("no base model; run `pretrain-base` first")
            self._base = load_base(self.checkpoint_dir(BASE_TAG))
        return self._base

    def init_poi_emb(self) -> None:
        """Initialize POI embeddings from the POI prompts."""
        if self._reuse(POI_INIT_TAG):
            return
        embeddings = init_poi_embeddings(self.base, self.corpus.pois)
        self._save(POI_INIT_TAG, {"poi_embeddings": embeddings}, kind="poi-init")
        self.record("init-poi-emb", self._checkpoint_inputs(BASE_TAG))

    def poi_init(self) -> torch.Tensor:
        return self.require(POI_INIT_TAG, "init-poi-emb").tensor("poi_embeddings")

    # ------------------------------------------------------------------ stages
    def purpose_sequences(self) -> List[CheckInSequence]:
        """Return training sequences cut at long gaps, long enough to label."""
        gap = self.data_config.gap_days
        min_length = self.ssl_config.min_length
        return [
            part
            for s in self.corpus.split.train
            for part in split_by_gap(s, gap)
            if len(part) >= min_length
        ]

    def label_purposes(self) -> Dict[str, int]:
        """Label purpose sequences into ``labels.tsv``; return the histogram."""
        labeler = self.ssl_config.make_labeler()
        labeled = label_sequences(
            self.purpose_sequences(), self.corpus.pois, labeler, self.labels_path
        )
        self.record("label-purposes", self._data_inputs())
        histogram = label_histogram(labeled)
        for purpose, n in histogram.items():
            logger.info("%-26s %d", purpose, n)
        return histogram

    def _labels(self) -> List[LabeledSequence]:
        if not self.labels_path.is_file():
            raise UsageError("no purpose labels; run `label-purposes` first")
        return label_sequences(
            self.purpose_sequences(),
            self.corpus.pois,
            self.ssl_config.make_labeler(),
            self.labels_path,
        )

    def _category_pois(self, flags: AblationFlags) -> Optional[PoiTable]:
        return None if flags.use_extended_poi_tokens else self.corpus.pois

    def pretrain_ssl(self, flags: AblationFlags) -> None:
        """Stage 1: purpose pretraining of the sequencing adapters."""
        if not (flags.use_ssl_pretraining and flags.use_sequencing_adapter):
            logger.info("%s has no purpose pretraining", flags.variant)
            return
        tag = flags.ssl_tag()
        if self._reuse(tag):
            return
        cfg = self.train_config
        base = self.base
        init = self.poi_init()
        labeled = self._labels()
        poi = trainable_copy(init) if flags.use_extended_poi_tokens else init
        adapters = fresh_adapters(base, "sequencing", cfg)
        encoder = SequenceEncoder(base, poi, adapters, self._category_pois(flags))
        purpose = trainable_copy(
            init_purpose_matrix(base.config.d, cfg.seed, cfg.init_std)
        )

        def tensors() -> Dict[str, torch.Tensor]:
            return {"poi_embeddings": poi, "purpose_matrix": purpose}

        state = TrainingState("ssl")
        pretrain_ssl(
            encoder,
            purpose,
            labeled,
            cfg,
            train_poi=flags.use_extended_poi_tokens,
            state=state,
            log=self.metrics_log,
            on_epoch_end=self._epoch_saver(tag, tensors, [adapters], flags),
        )
        self._save(
            tag, tensors(), [adapters], stage="ssl", epoch=state.epoch, flags=str(flags)
        )
        self.record("pretrain-ssl", self._checkpoint_inputs(BASE_TAG, POI_INIT_TAG))

    def _validator(
        self, make_bundle: Callable[[], ModelBundle]
    ) -> Callable[[], float]:
        cases = self.corpus.split.validation_of("group") or self.corpus.split.validation
        ks = self.eval_config.k_list
        k = 10 if 10 in ks else max(ks)
        c = self.corpus

        def validate() -> float:
            bundle = make_bundle()
            report = rank_cases(
                cases,
                bundle.embedder(c.members, c.groups),
                bundle.score_matrix,
                bundle.base.vocab.poi_rows,
                c.pois,
                [k],
                self.data_config.candidates,
            )
            return report.hr[k]

        return validate

    def train_seq(self, flags: AblationFlags) -> None:
        """Stage 2: next-POI training of the sequencing adapters."""
        if not flags.use_sequencing_adapter:
            logger.info("%s has no sequencing adapters", flags.variant)
            return
        tag = flags.seq_tag()
        if self._reuse(tag):
            return
        cfg = self.train_config
        base = self.base
        init = self.poi_init()
        if flags.use_ssl_pretraining:
            ssl = self.require(flags.ssl_tag(), "pretrain-ssl")
            adapters = ssl.adapter_set("sequencing")
            start = ssl.tensor("poi_embeddings")
        else:
            adapters = fresh_adapters(base, "sequencing", cfg)
            start = init
        poi = trainable_copy(start) if flags.use_extended_poi_tokens else init
        pois = self._category_pois(flags)
        encoder = SequenceEncoder(base, poi, adapters, pois)
        stage_flags = replace(flags, use_aggregation_fusion=False)

        def bundle() -> ModelBundle:
            return ModelBundle(base, poi.detach(), stage_flags, adapters, pois=pois)

        def tensors() -> Dict[str, torch.Tensor]:
            return {"poi_embeddings": poi}

        state = TrainingState("sequencing")
        train_sequencing(
            encoder,
            self.corpus.split.train,
            cfg,
            train_poi=flags.use_extended_poi_tokens,
            validate=self._validator(bundle),
            state=state,
            log=self.metrics_log,
            on_epoch_end=self._epoch_saver(tag, tensors, [adapters], flags),
        )
        self._save(
            tag,
            tensors(),
            [adapters],
            stage="sequencing",
            epoch=state.epoch,
            flags=str(flags),
        )
        inputs = [POI_INIT_TAG]
        if flags.use_ssl_pretraining:
            inputs.append(flags.ssl_tag())
        self.record("train-seq", self._data_inputs() + self._checkpoint_inputs(*inputs))

    def _sequencing(self, flags: AblationFlags) -> Any:
        """Return (sequencing adapters or None, POI embedding matrix)."""
        if not flags.use_sequencing_adapter:
            return None, self.poi_init()
        seq = self.require(flags.seq_tag(), "train-seq")
        init = self.poi_init()
        poi = seq.tensor("poi_embeddings") if flags.use_extended_poi_tokens else init
        return seq.adapter_set("sequencing"), poi

    def train_agg(self, flags: AblationFlags, alpha: Optional[float] = None) -> None:
        """Stage 3: aggregation adapters trained through the fused embedding."""
        if not flags.trains_aggregation:
            logger.info("%s has no aggregation adapters", flags.variant)
            return
        cfg = self.train_config
        if alpha is not None:
            cfg = replace(cfg, alpha=alpha)
        tag = flags.agg_tag(cfg.alpha)
        if self._reuse(tag):
            return
        seq_adapters, poi = self._sequencing(flags)
        base = self.base
        pois = self._category_pois(flags)
        encoder = SequenceEncoder(base, poi, seq_adapters, pois)
        c = self.corpus
        members = MemberEmbeddings(encoder, c.members)
        examples = aggregation_examples(
            encoder, members, c.split.train_of("group"), c.groups
        )
        agg = fresh_adapters(base, "aggregation", cfg, seed_offset=1)

        def bundle() -> ModelBundle:
            return ModelBundle(
                base, poi, flags, seq_adapters, agg, pois=pois, alpha=cfg.alpha
            )

        state = TrainingState("aggregation")
        train_aggregation(
            base,
            agg,
            examples,
            poi,
            cfg,
            validate=self._validator(bundle),
            state=state,
            log=self.metrics_log,
            on_epoch_end=self._epoch_saver(tag, lambda: {}, [agg], flags),
        )
        self._save(
            tag,
            {},
            [agg],
            stage="aggregation",
            epoch=state.epoch,
            flags=str(flags),
            alpha=cfg.alpha,
        )
        self.record("train-agg", self._checkpoint_inputs(flags.seq_tag()))

    # -------------------------------------------------------------- evaluation
    def bundle(
        self, flags: AblationFlags, alpha: Optional[float] = None
    ) -> ModelBundle:
        """Load everything a variant needs from its checkpoints."""
        alpha = self.train_config.alpha if alpha is None else alpha
        seq_adapters, poi = self._sequencing(flags)
        agg = None
        if flags.trains_aggregation:
            ckpt = self.require(flags.agg_tag(alpha), "train-agg")
            agg = ckpt.adapter_set("aggregation")
        return ModelBundle(
            self.base,
            poi,
            flags,
            seq_adapters,
            agg,
            pois=self._category_pois(flags),
            alpha=alpha,
        )

    def _evaluate(
        self, bundle: ModelBundle, cases: Sequence[EvalCase], kind: str
    ) -> MetricsReport:
        c = self.corpus
        return evaluate(
            bundle,
            cases,
            c.pois,
            c.members,
            c.groups,
            self.eval_config.k_list,
            self.data_config.candidates,
            kind,  # type: ignore
        )

    def evaluate(
        self, flags: AblationFlags, alpha: Optional[float] = None
    ) -> Dict[str, Any]:
        """Evaluate a variant on the test and cold-start cases; write the reports."""
        bundle = self.bundle(flags, alpha)
        variant = flags.variant
        split = self.corpus.split
        rows = []  # type: List[Dict[str, Any]]
        details = {}  # type: Dict[str, Any]
        reports = {}  # type: Dict[str, MetricsReport]
        for kind in OWNER_KINDS[::-1]:
            reports[kind] = self._evaluate(bundle, split.test, kind)
            row = reports[kind].as_row(variant=variant, owner_kind=kind, split="test")
            rows.append(row)
            details[kind] = reports[kind].as_dict()
        if split.cold_start:
            cold = self._evaluate(bundle, split.cold_start, "group")
            row = cold.as_row(variant=variant, owner_kind="group", split="cold_start")
            rows.append(row)
            details["cold_start"] = cold_start_report(cold, reports["group"])
        extra = {"flags": str(flags), "alpha": bundle.alpha, "details": details}
        self._write_report(variant, rows, extra)
        self.record("eval", self._data_inputs())
        return {"rows": rows, "details": details}

    def _write_report(
        self, variant: str, rows: List[Dict[str, Any]], extra: Dict[str, Any]
    ) -> None:
        json_path = self.path / "report.json"
        report = {"rows": [], "variants": {}}  # type: Dict[str, Any]
        if json_path.is_file():
            report = json.loads(json_path.read_text(encoding="utf-8"))
        report["rows"] = [r for r in report["rows"] if r["variant"] != variant] + rows
        report["variants"][variant] = extra
        JSONDumper().dump_file(report, json_path)
        TSVDumper(columns=self._report_columns()).dump_file(
            report, self.path / "report.tsv"
        )

    def _report_columns(self) -> List[str]:
        columns = ["variant", "owner_kind", "split", "n"]
        for k in self.eval_config.k_list:
            columns += ["HR@{}".format(k), "NDCG@{}".format(k)]
        return columns

    def report_text(self, fmt: ReportFormat = ReportFormat.TSV) -> str:
        """Return the report of every evaluated variant in a format."""
        path = self.path / "report.json"
        if not path.is_file():
            raise UsageError("no report in {}; run `eval` first".format(self.path))
        report = json.loads(path.read_text(encoding="utf-8"))
        if fmt == ReportFormat.TSV:
            return dumper_for(fmt, columns=self._report_columns()).dump(report)
        return dumper_for(fmt).dump(report)

    def recommend(
        self, flags: AblationFlags, alpha: Optional[float] = None, top: int = 10
    ) -> pathlib.Path:
        """Write the next-POI recommendations of every group."""
        bundle = self.bundle(flags, alpha)
        c = self.corpus
        embed = bundle.embedder(c.members, c.groups)
        rows = bundle.base.vocab.poi_rows
        out = []
        with torch.no_grad():
            for seq in c.group_sequences:
                case = EvalCase(seq, "", seq.timestamps[-1] + 1)
                candidates = candidate_set(
                    c.pois, seq.poi_ids[-1], seq.poi_ids, self.data_config.candidates
                )
                if not candidates:
                    continue
                index = torch.as_tensor([rows[p] for p in candidates], dtype=torch.long)
                scores = score_candidates(
                    embed(case), bundle.score_matrix[index], candidates
                )
                out.extend(recommend(seq.owner_id, scores, top))
        path = self.path / "recommendations.tsv"
        write_records(path, out)
        logger.info("%d recommendations written to %s", len(out), path)
        self.record("recommend", self._data_inputs())
        return path

    # ------------------------------------------------------------------ sweeps
    def train_variant(
        self, flags: AblationFlags, alpha: Optional[float] = None
    ) -> None:
        """Run every training stage the variant needs."""
        self.pretrain_ssl(flags)
        self.train_seq(flags)
        self.train_agg(flags, alpha)

    def _group_test(
        self, flags: AblationFlags, alpha: Optional[float]
    ) -> MetricsReport:
        bundle = self.bundle(flags, alpha)
        return self._evaluate(bundle, self.corpus.split.test, "group")

    def sweep(
        self, param: SweepParam, values: Sequence[Any], flags: AblationFlags
    ) -> str:
        """Retrain and evaluate per value; write ``sweep_<param>.tsv``."""
        qlora = self.config["qlora"]

        def train_and_eval(value: Any) -> MetricsReport:
            if param == "alpha":
                self.train_agg(flags, float(value))
                return self._group_test(flags, float(value))
            qlora.override["r"] = int(value)
            self.train_variant(flags)
            return self._group_test(flags, None)

        previous = qlora.override.get("r")
        try:
            results = sweep(param, values, train_and_eval)
        finally:
            if previous is None:
                qlora.override.pop("r", None)
            else:
                qlora.override["r"] = previous
        table = sweep_table(param, results)
        (self.path / "sweep_{}.tsv".format(param)).write_text(table, encoding="utf-8")
        self.record("sweep", self._data_inputs())
        return table

    def pipeline(self, flags: AblationFlags) -> Dict[str, Any]:
        """Run every step after data preparation, then evaluate."""
        if not all((self.data_dir / n).is_file() for n in GROUP_FILES):
            self.mine_groups()
        self.stats()
        self.pretrain_base()
        self.init_poi_emb()
        if flags.use_ssl_pretraining and flags.use_sequencing_adapter:
            self.label_purposes()
        self.train_variant(flags)
        return self.evaluate(flags)
