"""Trip-purpose taxonomy, purpose labelers, and purpose scoring.

Short (gap-split) check-in sequences are labeled with one of eleven trip
purposes, either by the rule-table heuristic or by an external
chat-completion model, and the labels train the sequence encoder through a
purpose embedding matrix.
"""

import collections
import concurrent.futures
import datetime
import enum
import hashlib
import json
import logging
import os
import pathlib
import re
import time
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field
from typing import (
    Any,
    ClassVar,
    Dict,
    FrozenSet,
    List,
    Mapping,
    Optional,
    Pattern,
    Sequence,
    Tuple,
    Union,
)

import httpx
import ruamel.yaml
import torch

from llmgpr._geo import haversine_km
from llmgpr.dataset import CheckInSequence, PoiTable
from llmgpr.dumper import write_records
from llmgpr.errors import DataError, UsageError
from llmgpr.parser import TSVParser
from llmgpr.record import LabelRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

PURPOSES = (
    "Business Trip",
    "Work Commute",
    "Tourism",
    "Short Vacation",
    "Cultural & Entertainment",
    "Shopping & Dining",
    "Social Events",
    "Fitness & Wellness",
    "Daily Commute",
    "Medical & Health Visits",
    "Education & Training",
)
N_PURPOSES = len(PURPOSES)
RULES_FILE = pathlib.Path(__file__).with_name("purpose_rules.yaml")
KEY_VARIABLE = "LLMGPR_LABELER_KEY"

COMMUTE_HOURS = frozenset(list(range(7, 10)) + list(range(16, 20)))

PROMPT_TEMPLATE = (
    "Given a sequence of check-in activities, your task is to classify into one "
    "of the following categories: {{{categories}}}.\n"
    "The format of a check-in activity is: (POIID, Name, Category, longitude, "
    "latitude, temporal difference from previous check-in, spatial difference "
    "from previous check-in)\n"
    "The check-in sequence is: {sequence}\n"
    "The format of your response: This sequence is classified as [Category]."
)
RE_REPLY = re.compile(r"classified\s+as\s*\[?\s*([A-Za-z&][A-Za-z& ]*?)\s*\]?\s*[.\n]")


class LabelSource(enum.Enum):
    """Origin of a purpose label; also the `ssl.labeler` setting."""

    HEURISTIC = "heuristic"
    EXTERNAL = "external"


def purpose_index(label: str) -> int:
    """Return the index of a purpose label; unknown labels are data errors."""
    try:
        return PURPOSES.index(label)
    except ValueError:
        raise DataError("unknown purpose label", [label]) from None


@dataclass(frozen=True)
class LabeledSequence:
    """A short sequence with its purpose index."""

    sequence: CheckInSequence
    label: int
    source: str = LabelSource.HEURISTIC.value

    def __post_init__(self) -> None:
        if not 0 <= self.label < N_PURPOSES:
            raise DataError("purpose index out of range", [self.label])

    @property
    def purpose(self) -> str:
        """Return the label text."""
        return PURPOSES[self.label]


# -----------------------------------------------------------------------------
# rule table
# -----------------------------------------------------------------------------
CONDITIONS = frozenset(
    [
        "dominant",
        "dominant_share_min",
        "has_all",
        "has_any",
        "span_km_min",
        "span_km_max",
        "commute_share_min",
        "weekday_share_min",
        "weekend_share_min",
        "duration_hours_min",
        "duration_hours_max",
    ]
)


@dataclass(frozen=True)
class SequenceFeatures:
    """Deterministic features the heuristic labeler decides on."""

    class_counts: Mapping[str, int]
    dominant: Optional[str]
    dominant_share: float
    span_km: float
    commute_share: float
    weekday_share: float
    weekend_share: float
    duration_hours: float

    @property
    def classes(self) -> FrozenSet[str]:
        return frozenset(self.class_counts)


def _names(value: Any) -> List[str]:
    return [str(v) for v in value] if isinstance(value, list) else [str(value)]


@dataclass(frozen=True)
class Rule:
    """One row of the rule table: a label and the conditions that select it."""

    label: str
    when: Mapping[str, Any] = field(default_factory=dict)

    def matches(self, f: SequenceFeatures) -> bool:
        """Return whether every condition holds for the features."""
        w = self.when
        checks = [
            "dominant" not in w or f.dominant in _names(w["dominant"]),
            f.dominant_share >= w.get("dominant_share_min", 0.0),
            set(_names(w.get("has_all", []))) <= f.classes,
            "has_any" not in w or bool(set(_names(w["has_any"])) & f.classes),
            f.span_km >= w.get("span_km_min", 0.0),
            f.span_km <= w.get("span_km_max", float("inf")),
            f.commute_share >= w.get("commute_share_min", 0.0),
            f.weekday_share >= w.get("weekday_share_min", 0.0),
            f.weekend_share >= w.get("weekend_share_min", 0.0),
            f.duration_hours >= w.get("duration_hours_min", 0.0),
            f.duration_hours <= w.get("duration_hours_max", float("inf")),
        ]
        return all(checks)


class RuleTable:
    """Category classes and ordered labeling rules read from a YAML file."""

    def __init__(
        self,
        classes: Mapping[str, Sequence[str]],
        rules: Sequence[Rule],
        default: str,
        version: int = 1,
    ) -> None:
        self.version = version
        self.default = default
        self.rules = list(rules)
        self.classes = {k: list(v) for k, v in classes.items()}
        self._patterns = [
            (
                name,
                re.compile(
                    r"\b(?:{})\b".format("|".join(re.escape(k.lower()) for k in kws))
                ),
            )
            for name, kws in self.classes.items()
        ]  # type: List[Tuple[str, Pattern[str]]]
        self._validate()

    def _validate(self) -> None:
        purpose_index(self.default)
        for rule in self.rules:
            purpose_index(rule.label)
            unknown = set(rule.when) - CONDITIONS
            if unknown:
                raise DataError("unknown rule condition", sorted(unknown))
            for key in ("dominant", "has_all", "has_any"):
                missing = set(_names(rule.when.get(key, []))) - set(self.classes)
                if missing:
                    raise DataError("rule names an undefined class", sorted(missing))

    def digest(self) -> str:
        """Return a short sha256 of the classes, rules, and default label."""
        data = {
            "version": self.version,
            "default": self.default,
            "classes": self.classes,
            "rules": [[r.label, dict(r.when)] for r in self.rules],
        }
        text = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def load(cls, path: Optional[PathLike] = None) -> "RuleTable":
        """Read a rule table; the shipped one by default."""
        path = pathlib.Path(path) if path else RULES_FILE
        if not path.is_file():
            raise UsageError("rule table not found: {}".format(path))
        data = ruamel.yaml.YAML(typ="safe").load(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict) or not {"classes", "rules"} <= set(data):
            raise DataError("rule table needs `classes` and `rules`", [str(path)])
        rules = [
            Rule(str(r["label"]), dict(r.get("when") or {})) for r in data["rules"]
        ]
        return cls(
            data["classes"],
            rules,
            str(data.get("default", "Daily Commute")),
            int(data.get("version", 1)),
        )

    def class_of(self, category: str) -> Optional[str]:
        """Return the first class with a keyword in the category, if any."""
        text = category.lower()
        for name, pattern in self._patterns:
            if pattern.search(text):
                return name
        return None

    def features(self, sequence: CheckInSequence, pois: PoiTable) -> SequenceFeatures:
        """Compute the labeling features of a sequence."""
        n = len(sequence)
        if n == 0:
            raise UsageError("cannot label an empty sequence")
        counts = collections.Counter()  # type: collections.Counter
        for p in sequence.poi_ids:
            c = self.class_of(pois[p].category)
            if c is not None:
                counts[c] += 1
        dominant, top = None, 0
        for name in self.classes:
            if counts[name] > top:
                dominant, top = name, counts[name]
        lats = [pois[p].lat for p in sequence.poi_ids]
        lons = [pois[p].lon for p in sequence.poi_ids]
        span = float(haversine_km(min(lats), min(lons), max(lats), max(lons)))
        times = [
            datetime.datetime.fromtimestamp(t, tz=datetime.timezone.utc)
            for t in sequence.timestamps
        ]
        weekday = sum(1 for t in times if t.weekday() < 5)
        commute = sum(1 for t in times if t.hour in COMMUTE_HOURS)
        ts = sequence.timestamps
        return SequenceFeatures(
            class_counts=dict(counts),
            dominant=dominant,
            dominant_share=top / n,
            span_km=span,
            commute_share=commute / n,
            weekday_share=weekday / n,
            weekend_share=(n - weekday) / n,
            duration_hours=(ts[-1] - ts[0]) / 3600.0,
        )

    def label(self, features: SequenceFeatures) -> str:
        """Return the label of the first matching rule, or the default."""
        for rule in self.rules:
            if rule.matches(features):
                return rule.label
        return self.default


# -----------------------------------------------------------------------------
# labelers
# -----------------------------------------------------------------------------
class AbsLabeler(metaclass=ABCMeta):
    """A purpose labeler of short check-in sequences."""

    source = NotImplemented  # type: ClassVar[str]

    @property
    def identity(self) -> str:
        """Return a text that changes whenever the labels may change."""
        return self.source

    @abstractmethod
    def label(self, sequence: CheckInSequence, pois: PoiTable) -> LabeledSequence:
        """Return the labeled sequence."""

    def label_all(
        self, sequences: Sequence[CheckInSequence], pois: PoiTable
    ) -> List[LabeledSequence]:
        """Label many sequences, keeping their order."""
        return [self.label(s, pois) for s in sequences]


class HeuristicLabeler(AbsLabeler):
    """Deterministic labeler driven by a rule table."""

    source = LabelSource.HEURISTIC.value

    def __init__(self, rules: Optional[RuleTable] = None) -> None:
        self.rules = rules if rules is not None else RuleTable.load()

    @property
    def identity(self) -> str:
        return "{}:v{}:{}".format(self.source, self.rules.version, self.rules.digest())

    def label(self, sequence: CheckInSequence, pois: PoiTable) -> LabeledSequence:
        text = self.rules.label(self.rules.features(sequence, pois))
        return LabeledSequence(sequence, purpose_index(text), self.source)


class ExternalLabeler(AbsLabeler):
    """Labeler asking a chat-completion endpoint, with a heuristic fallback.

    Requests are retried with exponential backoff; a sequence whose request
    keeps failing, or whose reply names no known purpose, is labeled by the
    fallback with a warning.
    """

    source = LabelSource.EXTERNAL.value

    def __init__(
        self,
        url: str,
        model: str,
        api_key: Optional[str] = None,
        timeout: float = 30.0,
        retries: int = 3,
        max_workers: int = 4,
        fallback: Optional[HeuristicLabeler] = None,
        client: Optional[httpx.Client] = None,
        base_delay: float = 1.0,
    ) -> None:
        if retries < 1 or max_workers < 1:
            raise UsageError("retries and max_workers must be positive")
        self.url = url
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(KEY_VARIABLE)
        if not self.api_key:
            logger.warning("%s is not set; requests carry no API key", KEY_VARIABLE)
        self.retries = retries
        self.max_workers = max_workers
        self.base_delay = base_delay
        self.fallback = fallback if fallback is not None else HeuristicLabeler()
        self.client = client or httpx.Client(timeout=httpx.Timeout(timeout))

    @property
    def identity(self) -> str:
        return "{}:{}@{}".format(self.source, self.model, self.url)

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = "Bearer " + self.api_key
        return headers

    def request(self, prompt: str) -> Optional[str]:
        """Return the reply text, or None after the last failed attempt."""
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        for attempt in range(self.retries):
            try:
                response = self.client.post(
                    self.url, json=body, headers=self._headers()
                )
                response.raise_for_status()
                return str(response.json()["choices"][0]["message"]["content"])
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                delay = self.base_delay * (2 ** attempt)
                logger.warning(
                    "Labeler request failed (attempt %d/%d): %s",
                    attempt + 1,
                    self.retries,
                    exc,
                )
                if attempt + 1 < self.retries and delay > 0:
                    time.sleep(delay)
        return None

    def label(self, sequence: CheckInSequence, pois: PoiTable) -> LabeledSequence:
        reply = self.request(render_purpose_prompt(sequence, pois))
        index = parse_purpose_reply(reply) if reply is not None else None
        if index is None:
            logger.warning(
                "No usable label for %s; using the heuristic", sequence.sequence_id
            )
            return self.fallback.label(sequence, pois)
        return LabeledSequence(sequence, index, self.source)

    def label_all(
        self, sequences: Sequence[CheckInSequence], pois: PoiTable
    ) -> List[LabeledSequence]:
        with concurrent.futures.ThreadPoolExecutor(self.max_workers) as pool:
            return list(pool.map(lambda s: self.label(s, pois), sequences))


def render_purpose_prompt(sequence: CheckInSequence, pois: PoiTable) -> str:
    """Return the classification prompt of a sequence."""
    items = []
    for i, (p, _) in enumerate(sequence.items):
        poi = pois[p]
        items.append(
            "({}, {}, {}, {:.4f}, {:.4f}, {:d}, {:.2f})".format(
                p,
                poi.name,
                poi.category,
                poi.lon,
                poi.lat,
                int(sequence.temporal_deltas[i]),
                sequence.spatial_deltas[i],
            )
        )
    return PROMPT_TEMPLATE.format(
        categories=", ".join(PURPOSES), sequence=", ".join(items)
    )


def parse_purpose_reply(text: str) -> Optional[int]:
    """Return the purpose index named in a reply, or None."""
    match = RE_REPLY.search(text + "\n")
    if not match:
        return None
    answer = " ".join(match.group(1).split()).lower()
    for i, label in enumerate(PURPOSES):
        if label.lower() == answer:
            return i
    return None


def assign_purpose(
    sequence: CheckInSequence, pois: PoiTable, labeler: AbsLabeler
) -> LabeledSequence:
    """Label one short sequence."""
    return labeler.label(sequence, pois)


def sequence_digest(sequence: CheckInSequence) -> str:
    """Return a short sha256 of the (POI, timestamp) items of a sequence."""
    h = hashlib.sha256()
    for poi_id, ts in sequence.items:
        h.update("{}\t{}\n".format(poi_id, ts).encode("utf-8"))
    return h.hexdigest()[:16]


def label_sequences(
    sequences: Sequence[CheckInSequence],
    pois: PoiTable,
    labeler: AbsLabeler,
    cache_path: Optional[PathLike] = None,
) -> List[LabeledSequence]:
    """Label sequences, reusing and then updating a `labels.tsv` cache.

    A cached label is reused only for the same labeler identity and the same
    sequence content.
    """
    identity = labeler.identity
    cached = {}  # type: Dict[Tuple[str, str], Tuple[int, str]]
    if cache_path is not None and pathlib.Path(cache_path).is_file():
        for _, rec in TSVParser(LabelRecord).parse_file(cache_path):
            if rec.labeler == identity and rec.digest is not None:
                key = (rec.sequence_id, rec.digest)
                cached[key] = (purpose_index(rec.label), rec.source)
    keys = {s.sequence_id: (s.sequence_id, sequence_digest(s)) for s in sequences}
    todo = [s for s in sequences if keys[s.sequence_id] not in cached]
    fresh = {ls.sequence.sequence_id: ls for ls in labeler.label_all(todo, pois)}
    result = []  # type: List[LabeledSequence]
    for s in sequences:
        if s.sequence_id in fresh:
            result.append(fresh[s.sequence_id])
        else:
            index, source = cached[keys[s.sequence_id]]
            result.append(LabeledSequence(s, index, source))
    logger.info(
        "Purpose labels: %d cached, %d new", len(sequences) - len(todo), len(todo)
    )
    if cache_path is not None:
        write_records(
            cache_path,
            (
                LabelRecord(
                    ls.sequence.sequence_id,
                    ls.purpose,
                    ls.source,
                    identity,
                    keys[ls.sequence.sequence_id][1],
                )
                for ls in result
            ),
        )
    return result


def label_histogram(labeled: Sequence[LabeledSequence]) -> Dict[str, int]:
    """Return the number of sequences per purpose, in taxonomy order."""
    counts = collections.Counter(ls.purpose for ls in labeled)
    return {p: counts[p] for p in PURPOSES}


# -----------------------------------------------------------------------------
# scoring
# -----------------------------------------------------------------------------
def init_purpose_matrix(d: int, seed: int = 0, std: float = 0.02) -> torch.Tensor:
    """Return a fresh (L, d) purpose embedding matrix."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(N_PURPOSES, d, generator=gen) * std


def score_purposes(
    purpose_matrix: torch.Tensor, embedding: torch.Tensor
) -> torch.Tensor:
    """Return purpose logits ``E_pur @ e`` for one embedding or a (B, d) batch."""
    if purpose_matrix.dim() != 2 or purpose_matrix.shape[0] != N_PURPOSES:
        raise UsageError("purpose matrix must have {} rows".format(N_PURPOSES))
    if purpose_matrix.shape[1] != embedding.shape[-1]:
        raise UsageError("purpose matrix and embedding differ in width")
    return embedding @ purpose_matrix.t()


# -----------------------------------------------------------------------------
# configuration
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class SSLConfig:
    """Settings of the `[ssl]` section."""

    labeler: LabelSource = LabelSource.HEURISTIC
    rules: str = ""
    url: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4"
    timeout: float = 30.0
    retries: int = 3
    max_workers: int = 4
    min_length: int = 2

    def __post_init__(self) -> None:
        if self.min_length < 1:
            raise UsageError("ssl.min_length must be positive")

    @classmethod
    def from_section(cls, section: Any) -> "SSLConfig":
        """Build from an `[ssl]` config section."""
        return cls(
            labeler=section.get_enum("labeler", LabelSource),
            rules=section.get_str("rules"),
            url=section.get_str("url"),
            model=section.get_str("model"),
            timeout=section.get_float("timeout"),
            retries=section.get_int("retries"),
            max_workers=section.get_int("max_workers"),
            min_length=section.get_int("min_length"),
        )

    def make_labeler(self, client: Optional[httpx.Client] = None) -> AbsLabeler:
        """Return the configured labeler."""
        heuristic = HeuristicLabeler(RuleTable.load(self.rules or None))
        if self.labeler is LabelSource.HEURISTIC:
            return heuristic
        return ExternalLabeler(
            self.url,
            self.model,
            timeout=self.timeout,
            retries=self.retries,
            max_workers=self.max_workers,
            fallback=heuristic,
            client=client,
        )
