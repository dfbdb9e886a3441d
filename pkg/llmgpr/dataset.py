"""Domain objects of location-based check-in data."""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import (
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
)

import networkx
import numpy
from typing_extensions import Literal

from llmgpr._collections import UniqueIdDict
from llmgpr._geo import haversine_km
from llmgpr.errors import DataError

logger = logging.getLogger(__name__)

OwnerKind = Literal["user", "group"]
OWNER_KINDS = ("user", "group")  # type: Tuple[OwnerKind, ...]


@dataclass(frozen=True)
class Poi:
    """A venue with a category tag and WGS84 coordinates."""

    id: str
    name: str
    category: str
    lat: float
    lon: float
    address: Optional[str] = None
    description: Optional[str] = None

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise DataError("latitude out of [-90, 90]", [self.id])
        if not -180.0 <= self.lon <= 180.0:
            raise DataError("longitude out of [-180, 180]", [self.id])


@dataclass(frozen=True)
class CheckIn:
    """A visit of a user or a group to a POI."""

    owner_id: str
    poi_id: str
    timestamp: int
    owner_kind: OwnerKind = "user"

    def __post_init__(self) -> None:
        if self.timestamp <= 0:
            raise DataError("non-positive timestamp", [self])
        if self.owner_kind not in OWNER_KINDS:
            raise DataError("unknown owner kind", [self])


CheckInTable = List[CheckIn]
_CoordArrays = Tuple[List[str], numpy.ndarray, numpy.ndarray]


class PoiTable(UniqueIdDict[str, Poi]):
    """POIs keyed by id, with cached coordinate arrays for distance queries."""

    def __init__(self, pois: Iterable[Poi] = ()) -> None:
        super().__init__()
        self._arrays = None  # type: Optional[_CoordArrays]
        for p in pois:
            self.add(p)

    def add(self, poi: Poi) -> None:
        """Add a POI; duplicate ids are a data error."""
        self[poi.id] = poi
        self._arrays = None

    def arrays(self) -> _CoordArrays:
        """Return (ids, latitudes, longitudes) in insertion order."""
        if self._arrays is None:
            ids = list(self.keys())
            lat = numpy.array([self[i].lat for i in ids], dtype=numpy.float64)
            lon = numpy.array([self[i].lon for i in ids], dtype=numpy.float64)
            self._arrays = (ids, lat, lon)
        return self._arrays

    def categories(self) -> List[str]:
        """Return the distinct categories, sorted."""
        return sorted({p.category for p in self.values()})

    def distance_km(self, a: str, b: str) -> float:
        """Return the haversine distance between two POIs."""
        pa, pb = self[a], self[b]
        return float(haversine_km(pa.lat, pa.lon, pb.lat, pb.lon))


class SocialGraph:
    """Undirected friendship edges between users, backed by a networkx graph."""

    def __init__(self, edges: Iterable[Tuple[str, str]] = ()) -> None:
        self.graph = networkx.Graph()
        for a, b in edges:
            self.add(a, b)

    def add(self, a: str, b: str) -> None:
        """Add an edge; self-edges are ignored with a warning."""
        if a == b:
            logger.warning("Self-edge ignored: %s", a)
            return
        self.graph.add_edge(a, b)

    def connected(self, a: str, b: str) -> bool:
        """Return whether two users are friends."""
        return bool(self.graph.has_edge(a, b))

    def neighbors(self, a: str) -> FrozenSet[str]:
        """Return the friends of a user."""
        if a not in self.graph:
            return frozenset()
        return frozenset(self.graph.neighbors(a))

    @property
    def edges(self) -> FrozenSet[FrozenSet[str]]:
        """Return the set of unordered pairs."""
        return frozenset(frozenset(e) for e in self.graph.edges())

    def sorted_edges(self) -> List[Tuple[str, str]]:
        """Return each edge once as a sorted pair, in sorted order."""
        return sorted((min(a, b), max(a, b)) for a, b in self.graph.edges())

    def users(self) -> List[str]:
        """Return users having at least one friend."""
        return sorted(self.graph.nodes())

    def __len__(self) -> int:
        return int(self.graph.number_of_edges())


def group_id_for(member_ids: Iterable[str]) -> str:
    """Return the stable id of a group with the given members."""
    key = ",".join(sorted(member_ids))
    return "g" + hashlib.sha1(key.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class Group:
    """A set of socially connected users who visit places together."""

    id: str
    member_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.member_ids) < 2:
            raise DataError("group with fewer than two members", [self.id])
        if len(set(self.member_ids)) != len(self.member_ids):
            raise DataError("group with repeated members", [self.id])

    @classmethod
    def of(cls, member_ids: Iterable[str]) -> "Group":
        """Create a group whose id is derived from its members."""
        members = tuple(sorted(member_ids))
        return cls(group_id_for(members), members)


@dataclass(frozen=True)
class CheckInSequence:
    """Chronologically ordered check-ins of one owner, with deltas.

    ``temporal_deltas`` are seconds and ``spatial_deltas`` kilometers between
    consecutive items; the first entry of both is zero.
    """

    owner_id: str
    owner_kind: OwnerKind
    items: Tuple[Tuple[str, int], ...]
    temporal_deltas: Tuple[int, ...]
    spatial_deltas: Tuple[float, ...]
    part: int = 0

    def __post_init__(self) -> None:
        n = len(self.items)
        if len(self.temporal_deltas) != n or len(self.spatial_deltas) != n:
            raise DataError("delta arrays do not match items", [self.sequence_id])
        ts = [t for _, t in self.items]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise DataError("timestamps are not sorted", [self.sequence_id])

    @classmethod
    def from_items(
        cls,
        owner_id: str,
        owner_kind: OwnerKind,
        items: Sequence[Tuple[str, int]],
        pois: PoiTable,
        part: int = 0,
    ) -> "CheckInSequence":
        """Create a sequence from sorted items, computing both deltas."""
        items = tuple((str(p), int(t)) for p, t in items)
        temporal = [0] + [b[1] - a[1] for a, b in zip(items, items[1:])]
        spatial = [0.0] + [
            pois.distance_km(a[0], b[0]) for a, b in zip(items, items[1:])
        ]
        return cls(owner_id, owner_kind, items, tuple(temporal), tuple(spatial), part)

    def slice(self, start: int, stop: Optional[int] = None) -> "CheckInSequence":
        """Return the items in [start, stop) with the first deltas reset to zero."""
        items = self.items[start:stop]
        temporal = self.temporal_deltas[start:stop]
        spatial = self.spatial_deltas[start:stop]
        if items:
            temporal = (0,) + temporal[1:]
            spatial = (0.0,) + spatial[1:]
        return CheckInSequence(
            self.owner_id, self.owner_kind, items, temporal, spatial, self.part
        )

    def with_part(self, part: int) -> "CheckInSequence":
        """Return the same sequence tagged with a part number."""
        return CheckInSequence(
            self.owner_id,
            self.owner_kind,
            self.items,
            self.temporal_deltas,
            self.spatial_deltas,
            part,
        )

    @property
    def sequence_id(self) -> str:
        """Return an id unique among owners and gap-split parts."""
        base = "{}:{}".format(self.owner_kind, self.owner_id)
        return base if self.part == 0 else "{}#{}".format(base, self.part)

    @property
    def poi_ids(self) -> List[str]:
        """Return the POI ids in order."""
        return [p for p, _ in self.items]

    @property
    def timestamps(self) -> List[int]:
        """Return the timestamps in order."""
        return [t for _, t in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Tuple[str, int]]:
        return iter(self.items)


@dataclass(frozen=True)
class EvalCase:
    """A prefix to encode and the POI it should rank first."""

    prefix: CheckInSequence
    target: str
    target_timestamp: int

    @property
    def sequence_id(self) -> str:
        """Return the id of the sequence the case comes from."""
        return self.prefix.sequence_id


@dataclass
class DatasetSplit:
    """Leave-one-out split of all sequences, plus the cold-start holdout."""

    train: List[CheckInSequence] = field(default_factory=list)
    validation: List[EvalCase] = field(default_factory=list)
    test: List[EvalCase] = field(default_factory=list)
    cold_start_ids: FrozenSet[str] = frozenset()
    cold_start: List[EvalCase] = field(default_factory=list)

    def train_of(self, kind: OwnerKind) -> List[CheckInSequence]:
        """Return training prefixes of the given owner kind."""
        return [s for s in self.train if s.owner_kind == kind]

    def test_of(self, kind: OwnerKind) -> List[EvalCase]:
        """Return test cases of the given owner kind."""
        return [c for c in self.test if c.prefix.owner_kind == kind]

    def validation_of(self, kind: OwnerKind) -> List[EvalCase]:
        """Return validation cases of the given owner kind."""
        return [c for c in self.validation if c.prefix.owner_kind == kind]
