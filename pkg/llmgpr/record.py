"""Module to describe each type of TSV rows.

The row hierarchy is given by:

- AbsRecord
  - CheckInRecord        checkins.tsv, group_checkins.tsv
  - PoiRecord            pois.tsv
  - SocialRecord         social.tsv
  - GroupRecord          groups.tsv
  - LabelRecord          labels.tsv
  - VocabRecord          vocab.tsv
  - RecommendationRecord recommendations.tsv
"""
import logging
import re
from abc import ABCMeta, abstractmethod
from typing import Any, ClassVar, List, Optional, Pattern, Type, TypeVar, Union

from llmgpr._record import (
    FLOAT,
    ID,
    ID_LIST,
    INT,
    SEP,
    TAIL,
    TEXT,
    cap,
    number_to_str,
    optional_text,
    possible,
    to_number,
)
from llmgpr.dataset import CheckIn, Group, OwnerKind, Poi

logger = logging.getLogger(__name__)

LT = TypeVar("LT", bound="AbsRecord")
SValue = Union[str, float]


class AbsRecord(metaclass=ABCMeta):
    """Abstract class for a row of a tab-separated file."""

    _pattern = NotImplemented  # type: ClassVar[str]
    _pattern_compiled = None  # type: ClassVar[Optional[Pattern[str]]]

    @classmethod
    def pattern(cls) -> Pattern[str]:
        """Return a regexp pattern matching a row of the type."""
        if cls._pattern_compiled is None:
            cls._pattern_compiled = re.compile("^{}$".format(cls._pattern))
        return cls._pattern_compiled

    @classmethod
    def construct(cls: Type[LT], line: str) -> "Optional[LT]":
        """Construct an object from a line if it matches the pattern."""
        match = cls.pattern().match(line.rstrip("\n"))
        if match:
            return cls(**match.groupdict())
        else:
            return None

    @abstractmethod
    def __init__(self, **kwargs: Any) -> None:
        pass

    def __str__(self) -> str:
        return self.to_tsv()

    def to_tsv(self) -> str:
        """Return the row as a tab-separated line without line break."""
        return "\t".join(self._format(v) for v in self._fields())

    @abstractmethod
    def _fields(self) -> List[Any]:
        pass

    @staticmethod
    def _format(v: Any) -> str:
        if v is None:
            return ""
        if isinstance(v, str):
            return v
        return number_to_str(v)


class CheckInRecord(AbsRecord):
    """Row ``owner_id, poi_id, timestamp``."""

    _pattern = (
        cap(ID, "owner_id")
        + SEP
        + cap(ID, "poi_id")
        + SEP
        + cap(INT, "timestamp")
        + TAIL
    )

    def __init__(self, owner_id, poi_id, timestamp):
        # type: (str, str, Union[str, int])->None
        self.owner_id = owner_id.strip()
        self.poi_id = poi_id.strip()
        self.timestamp = int(to_number(timestamp))

    def _fields(self) -> List[Any]:
        return [self.owner_id, self.poi_id, self.timestamp]

    def to_checkin(self, owner_kind: OwnerKind = "user") -> CheckIn:
        """Return the domain object."""
        return CheckIn(self.owner_id, self.poi_id, self.timestamp, owner_kind)

    @classmethod
    def of(cls, checkin: CheckIn) -> "CheckInRecord":
        """Return the row for a check-in."""
        return cls(checkin.owner_id, checkin.poi_id, checkin.timestamp)


class PoiRecord(AbsRecord):
    """Row ``poi_id, name, category, lat, lon, address, description``.

    The last two fields may be empty or missing.
    """

    _pattern = (
        cap(ID, "poi_id")
        + SEP
        + cap(TEXT, "name")
        + SEP
        + cap(TEXT, "category")
        + SEP
        + cap(FLOAT, "lat")
        + SEP
        + cap(FLOAT, "lon")
        + possible(SEP + cap(TEXT, "address"))
        + possible(SEP + cap(TEXT, "description"))
        + TAIL
    )

    def __init__(
        self, poi_id, name, category, lat, lon, address=None, description=None
    ):
        # type: (str, str, str, SValue, SValue, Optional[str], Optional[str])->None
        self.poi_id = poi_id.strip()
        self.name = name.strip()
        self.category = category.strip()
        self.lat = float(to_number(lat))
        self.lon = float(to_number(lon))
        self.address = optional_text(address)
        self.description = optional_text(description)

    def _fields(self) -> List[Any]:
        return [
            self.poi_id,
            self.name,
            self.category,
            self.lat,
            self.lon,
            self.address,
            self.description,
        ]

    def to_poi(self) -> Poi:
        """Return the domain object; bound violations raise a DataError."""
        return Poi(
            self.poi_id,
            self.name,
            self.category,
            self.lat,
            self.lon,
            self.address,
            self.description,
        )

    @classmethod
    def of(cls, poi: Poi) -> "PoiRecord":
        """Return the row for a POI."""
        return cls(
            poi.id,
            poi.name,
            poi.category,
            poi.lat,
            poi.lon,
            poi.address,
            poi.description,
        )


class SocialRecord(AbsRecord):
    """Row ``user_id_a, user_id_b``."""

    _pattern = cap(ID, "a") + SEP + cap(ID, "b") + TAIL

    def __init__(self, a, b):
        # type: (str, str)->None
        self.a = a.strip()
        self.b = b.strip()

    def _fields(self) -> List[Any]:
        return [self.a, self.b]


class GroupRecord(AbsRecord):
    """Row ``group_id, member_id_1,member_id_2,...``."""

    _pattern = cap(ID, "group_id") + SEP + cap(ID_LIST, "members") + TAIL

    def __init__(self, group_id, members):
        # type: (str, Union[str, List[str]])->None
        self.group_id = group_id.strip()
        if isinstance(members, str):
            members = members.split(",")
        self.members = [m.strip() for m in members]

    def _fields(self) -> List[Any]:
        return [self.group_id, ",".join(self.members)]

    def to_group(self) -> Group:
        """Return the domain object."""
        return Group(self.group_id, tuple(self.members))

    @classmethod
    def of(cls, group: Group) -> "GroupRecord":
        """Return the row for a group."""
        return cls(group.id, list(group.member_ids))


class LabelRecord(AbsRecord):
    """Row ``sequence_id, label, source, labeler, digest`` of the label cache.

    ``labeler`` identifies the labeler and ``digest`` the sequence content; a
    row lacking them never matches a cache lookup.
    """

    _pattern = (
        cap(ID, "sequence_id")
        + SEP
        + cap(ID, "label")
        + SEP
        + cap(ID, "source")
        + possible(SEP + cap(ID, "labeler") + SEP + cap(ID, "digest"))
        + TAIL
    )

    def __init__(self, sequence_id, label, source, labeler=None, digest=None):
        # type: (str, str, str, Optional[str], Optional[str])->None
        self.sequence_id = sequence_id.strip()
        self.label = label.strip()
        self.source = source.strip()
        self.labeler = optional_text(labeler)
        self.digest = optional_text(digest)

    def _fields(self) -> List[Any]:
        return [self.sequence_id, self.label, self.source, self.labeler, self.digest]


class VocabRecord(AbsRecord):
    """Row ``token, id`` of a serialized vocabulary."""

    _pattern = cap(r"[^\t\r\n]+", "token") + SEP + cap(INT, "token_id") + TAIL

    def __init__(self, token, token_id):
        # type: (str, Union[str, int])->None
        self.token = token
        self.token_id = int(to_number(token_id))

    def _fields(self) -> List[Any]:
        return [self.token, self.token_id]


class RecommendationRecord(AbsRecord):
    """Row ``owner_id, rank, poi_id, probability``."""

    _pattern = (
        cap(ID, "owner_id")
        + SEP
        + cap(INT, "rank")
        + SEP
        + cap(ID, "poi_id")
        + SEP
        + cap(FLOAT, "probability")
        + TAIL
    )

    def __init__(self, owner_id, rank, poi_id, probability):
        # type: (str, Union[str, int], str, SValue)->None
        self.owner_id = owner_id.strip()
        self.rank = int(to_number(rank))
        self.poi_id = poi_id.strip()
        self.probability = float(to_number(probability))

    def _fields(self) -> List[Any]:
        return [self.owner_id, self.rank, self.poi_id, self.probability]
