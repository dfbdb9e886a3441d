"""Group mining, sequence construction, splitting, and candidate generation."""

import logging
import pathlib
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import networkx
import numpy

from llmgpr._geo import haversine_km
from llmgpr.dataset import (
    CheckIn,
    CheckInSequence,
    CheckInTable,
    DatasetSplit,
    EvalCase,
    Group,
    PoiTable,
    SocialGraph,
)
from llmgpr.dumper import write_records
from llmgpr.errors import UsageError
from llmgpr.parser import parse_checkins, parse_groups
from llmgpr.record import CheckInRecord, GroupRecord, PoiRecord, SocialRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]
_Item = Tuple[str, int]

SECONDS_PER_DAY = 86400
DEFAULT_WINDOW_SECONDS = 1800
DEFAULT_MAX_LEN = 200
DEFAULT_GAP_DAYS = 5.0
DEFAULT_CANDIDATES = 500
DEFAULT_MIN_INTERACTIONS = 10


@dataclass(frozen=True)
class DataConfig:
    """Knobs of the `[data]` section used by preprocessing and candidates."""

    window_seconds: int = DEFAULT_WINDOW_SECONDS
    max_len: int = DEFAULT_MAX_LEN
    gap_days: float = DEFAULT_GAP_DAYS
    candidates: int = DEFAULT_CANDIDATES
    min_interactions: int = DEFAULT_MIN_INTERACTIONS

    def __post_init__(self) -> None:
        if self.window_seconds < 0:
            raise UsageError("window_seconds must not be negative")
        if self.max_len < 3:
            raise UsageError("max_len must be at least 3")
        if self.gap_days <= 0 or self.candidates <= 0:
            raise UsageError("gap_days and candidates must be positive")

    @classmethod
    def from_section(cls, section: Any) -> "DataConfig":
        """Build from a `[data]` config section."""
        return cls(
            window_seconds=section.get_int("window_seconds"),
            max_len=section.get_int("max_len"),
            gap_days=section.get_float("gap_days"),
            candidates=section.get_int("candidates"),
            min_interactions=section.get_int("min_interactions"),
        )


# -----------------------------------------------------------------------------
# groups
# -----------------------------------------------------------------------------
def mine_groups(
    checkins: Iterable[CheckIn],
    social: SocialGraph,
    window_seconds: int = DEFAULT_WINDOW_SECONDS,
) -> Tuple[List[Group], CheckInTable]:
    """Find groups of friends who visit the same POI at the same time.

    Two check-ins at one POI are co-present when their users are friends and
    their timestamps differ by at most `window_seconds`. Every maximal clique
    of co-present check-ins is a co-visit of its users, dated at the earliest
    member timestamp. Co-visits of the same group at the same POI within
    `window_seconds` of the last kept one are merged. Identical member sets
    share one group id. The result does not depend on the input order.
    """
    rows = sorted(checkins, key=lambda c: (c.poi_id, c.timestamp, c.owner_id))
    if any(c.owner_kind != "user" for c in rows):
        raise UsageError("mine_groups expects user check-ins only")
    by_poi = defaultdict(list)  # type: Dict[str, List[CheckIn]]
    for c in rows:
        by_poi[c.poi_id].append(c)

    groups = {}  # type: Dict[str, Group]
    stamps = defaultdict(set)  # type: Dict[Tuple[str, str], Set[int]]
    for poi_id in sorted(by_poi):
        visits = by_poi[poi_id]
        copresent = networkx.Graph()
        for i, a in enumerate(visits):
            for b in visits[i + 1 :]:
                if b.timestamp - a.timestamp > window_seconds:
                    break
                if social.connected(a.owner_id, b.owner_id):
                    copresent.add_edge(a, b)
        for clique in networkx.find_cliques(copresent):
            group = Group.of(c.owner_id for c in clique)
            groups.setdefault(group.id, group)
            stamps[group.id, poi_id].add(min(c.timestamp for c in clique))

    group_checkins = []  # type: CheckInTable
    for (gid, poi_id), times in stamps.items():
        last = None  # type: Optional[int]
        for ts in sorted(times):
            if last is None or ts - last > window_seconds:
                group_checkins.append(CheckIn(gid, poi_id, ts, "group"))
                last = ts
    group_checkins.sort(key=lambda c: (c.owner_id, c.timestamp, c.poi_id))
    logger.info(
        "Mined %d groups with %d group check-ins", len(groups), len(group_checkins)
    )
    return [groups[k] for k in sorted(groups)], group_checkins


# -----------------------------------------------------------------------------
# sequences
# -----------------------------------------------------------------------------
def build_sequences(
    checkins: Iterable[CheckIn], pois: PoiTable, max_len: int = DEFAULT_MAX_LEN
) -> List[CheckInSequence]:
    """Return one chronological sequence per owner, keeping the latest `max_len`."""
    if max_len < 1:
        raise UsageError("max_len must be positive")
    by_owner = defaultdict(list)  # type: Dict[Tuple[str, str], List[_Item]]
    for c in checkins:
        by_owner[(c.owner_kind, c.owner_id)].append((c.poi_id, c.timestamp))
    result = []  # type: List[CheckInSequence]
    for (kind, owner), items in sorted(by_owner.items()):
        items.sort(key=lambda x: (x[1], x[0]))
        if len(items) > max_len:
            items = items[-max_len:]
        seq = CheckInSequence.from_items(owner, kind, items, pois)  # type: ignore
        result.append(seq)
    return result


def split_by_gap(
    sequence: CheckInSequence, gap_days: float = DEFAULT_GAP_DAYS
) -> List[CheckInSequence]:
    """Cut a sequence before every item following a gap longer than `gap_days`."""
    if gap_days <= 0:
        raise UsageError("gap_days must be positive")
    limit = gap_days * SECONDS_PER_DAY
    cuts = [i for i, dt in enumerate(sequence.temporal_deltas) if i > 0 and dt > limit]
    if not cuts:
        return [sequence]
    bounds = [0] + cuts + [len(sequence)]
    return [
        sequence.slice(a, b).with_part(k + 1)
        for k, (a, b) in enumerate(zip(bounds, bounds[1:]))
    ]


def leave_one_out(
    sequence: CheckInSequence,
) -> Optional[Tuple[CheckInSequence, EvalCase, EvalCase]]:
    """Return (training prefix, validation case, test case), or None if M < 3."""
    m = len(sequence)
    if m < 3:
        logger.warning(
            "Sequence %s has %d items; excluded from evaluation",
            sequence.sequence_id,
            m,
        )
        return None
    val_poi, val_ts = sequence.items[m - 2]
    test_poi, test_ts = sequence.items[m - 1]
    train = sequence.slice(0, m - 2)
    val = EvalCase(train, val_poi, val_ts)
    test = EvalCase(sequence.slice(0, m - 1), test_poi, test_ts)
    return train, val, test


def make_split(
    sequences: Iterable[CheckInSequence], cold_start_ids: Iterable[str] = ()
) -> DatasetSplit:
    """Apply leave-one-out to every sequence; hold out cold-start sequences."""
    cold = frozenset(cold_start_ids)
    split = DatasetSplit(cold_start_ids=cold)
    for seq in sequences:
        parts = leave_one_out(seq)
        if parts is None:
            continue
        train, val, test = parts
        if seq.sequence_id in cold:
            split.cold_start.append(test)
            continue
        split.train.append(train)
        split.validation.append(val)
        split.test.append(test)
    return split


def member_history(sequence: CheckInSequence, before_timestamp: int) -> CheckInSequence:
    """Return the items of `sequence` strictly before `before_timestamp`."""
    k = sum(1 for t in sequence.timestamps if t < before_timestamp)
    return sequence.slice(0, k)


# -----------------------------------------------------------------------------
# candidates
# -----------------------------------------------------------------------------
def candidate_set(
    pois: PoiTable,
    anchor_poi: str,
    visited_poi_ids: Iterable[str],
    h: int = DEFAULT_CANDIDATES,
) -> List[str]:
    """Return up to `h` unvisited POIs nearest to the anchor.

    Ties in distance are broken by ascending POI id.
    """
    if h <= 0:
        raise UsageError("h must be positive")
    anchor = pois[anchor_poi]
    ids, lat, lon = pois.arrays()
    visited = set(visited_poi_ids)
    keep = numpy.array([i not in visited for i in ids], dtype=bool)
    if not keep.any():
        return []
    idx = numpy.flatnonzero(keep)
    dist = haversine_km(anchor.lat, anchor.lon, lat[idx], lon[idx])
    kept_ids = [ids[i] for i in idx]
    id_rank = numpy.argsort(numpy.argsort(numpy.array(kept_ids), kind="stable"))
    order = numpy.lexsort((id_rank, dist))[:h]
    return [kept_ids[i] for i in order]


def with_target(candidates: Sequence[str], target: str) -> List[str]:
    """Return the candidates with the ground truth appended once."""
    if target in candidates:
        return list(candidates)
    return list(candidates) + [target]


# -----------------------------------------------------------------------------
# preprocessing and statistics
# -----------------------------------------------------------------------------
def filter_sparse(
    checkins: Iterable[CheckIn],
    pois: PoiTable,
    min_interactions: int = DEFAULT_MIN_INTERACTIONS,
) -> Tuple[CheckInTable, PoiTable]:
    """Drop users and POIs with fewer than `min_interactions` check-ins.

    Removal is repeated until no user or POI falls below the threshold.
    """
    rows = list(checkins)
    if min_interactions <= 1:
        return rows, pois
    while True:
        users = defaultdict(int)  # type: Dict[str, int]
        places = defaultdict(int)  # type: Dict[str, int]
        for c in rows:
            users[c.owner_id] += 1
            places[c.poi_id] += 1
        kept = [
            c
            for c in rows
            if users[c.owner_id] >= min_interactions
            and places[c.poi_id] >= min_interactions
        ]
        if len(kept) == len(rows):
            break
        rows = kept
    used = {c.poi_id for c in rows}
    filtered = PoiTable(p for p in pois.values() if p.id in used)
    logger.info(
        "Interaction filter kept %d check-ins and %d of %d POIs",
        len(rows),
        len(filtered),
        len(pois),
    )
    return rows, filtered


@dataclass(frozen=True)
class DatasetStats:
    """Size statistics of a dataset."""

    users: int
    groups: int
    pois: int
    categories: int
    user_checkins: int
    group_checkins: int
    checkins_per_user: float
    checkins_per_group: float
    users_per_group: float

    def as_dict(self) -> Dict[str, Any]:
        """Return the statistics as a plain dictionary."""
        return asdict(self)


def dataset_stats(
    checkins: Sequence[CheckIn],
    groups: Sequence[Group],
    group_checkins: Sequence[CheckIn],
    pois: PoiTable,
) -> DatasetStats:
    """Compute the dataset statistics table."""
    users = {c.owner_id for c in checkins}
    n_groups = len(groups)
    return DatasetStats(
        users=len(users),
        groups=n_groups,
        pois=len(pois),
        categories=len(pois.categories()),
        user_checkins=len(checkins),
        group_checkins=len(group_checkins),
        checkins_per_user=len(checkins) / len(users) if users else 0.0,
        checkins_per_group=len(group_checkins) / n_groups if n_groups else 0.0,
        users_per_group=(
            sum(len(g.member_ids) for g in groups) / n_groups if n_groups else 0.0
        ),
    )


# -----------------------------------------------------------------------------
# files
# -----------------------------------------------------------------------------
def write_dataset(
    directory: PathLike,
    checkins: Sequence[CheckIn],
    pois: PoiTable,
    social: SocialGraph,
) -> None:
    """Write checkins.tsv, pois.tsv, and social.tsv."""
    d = pathlib.Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_records(d / "checkins.tsv", (CheckInRecord.of(c) for c in checkins))
    write_records(d / "pois.tsv", (PoiRecord.of(p) for p in pois.values()))
    edges = social.sorted_edges()
    write_records(d / "social.tsv", (SocialRecord(a, b) for a, b in edges))


def write_groups(
    directory: PathLike, groups: Sequence[Group], group_checkins: Sequence[CheckIn]
) -> None:
    """Write groups.tsv and group_checkins.tsv."""
    d = pathlib.Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_records(d / "groups.tsv", (GroupRecord.of(g) for g in groups))
    rows = (CheckInRecord.of(c) for c in group_checkins)
    write_records(d / "group_checkins.tsv", rows)


def load_groups(
    directory: PathLike, pois: PoiTable
) -> Tuple[List[Group], CheckInTable]:
    """Read groups.tsv and group_checkins.tsv written by `write_groups`."""
    d = pathlib.Path(directory)
    groups = parse_groups(d / "groups.tsv")
    group_checkins = parse_checkins(d / "group_checkins.tsv", pois, owner_kind="group")
    return groups, group_checkins
