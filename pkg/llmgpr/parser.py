"""Parsers for the tab-separated data files."""

import logging
import pathlib
from typing import Generic, List, Tuple, Type, TypeVar, Union

from llmgpr.dataset import CheckInTable, Group, OwnerKind, PoiTable, SocialGraph
from llmgpr.errors import DataError
from llmgpr.record import (
    AbsRecord,
    CheckInRecord,
    GroupRecord,
    PoiRecord,
    SocialRecord,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]
RT = TypeVar("RT", bound=AbsRecord)


class TSVParser(Generic[RT]):
    """Line-oriented parser producing records of one type.

    Rows that do not match the record pattern are skipped with a warning and
    counted in `malformed`.
    """

    def __init__(self, record_class: Type[RT]) -> None:
        self.record_class = record_class
        self.malformed = []  # type: List[Tuple[int, str]]

    def _parse_line(self, line: str) -> "RT":
        obj = self.record_class.construct(line)
        if obj is None:
            raise ValueError(line)
        return obj

    def parse(self, text: str) -> List[Tuple[int, RT]]:
        """Parse a text and return (line number, record) pairs."""
        self.malformed = []
        result = []  # type: List[Tuple[int, RT]]
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue  # empty line will be ignored
            try:
                result.append((n, self._parse_line(line)))
            except ValueError:
                logger.warning("Unrecognized row %d: %s", n, line)
                self.malformed.append((n, line))
        return result

    def parse_file(self, path: PathLike) -> List[Tuple[int, RT]]:
        """Parse a file; a missing file is a data error."""
        path = pathlib.Path(path)
        if not path.is_file():
            raise DataError("missing file", [str(path)])
        records = self.parse(path.read_text(encoding="utf-8"))
        if self.malformed:
            logger.warning(
                "%s: %d malformed rows skipped", path.name, len(self.malformed)
            )
        return records


def parse_pois(path: PathLike) -> PoiTable:
    """Read pois.tsv."""
    pois = PoiTable()
    for n, rec in TSVParser(PoiRecord).parse_file(path):
        try:
            pois.add(rec.to_poi())
        except DataError as e:
            raise DataError("{} (row {})".format(e, n)) from e
    return pois


def parse_checkins(
    path: PathLike, pois: PoiTable, owner_kind: OwnerKind = "user"
) -> CheckInTable:
    """Read checkins.tsv, verifying that every POI resolves."""
    checkins = []  # type: CheckInTable
    unresolved = []  # type: List[str]
    for n, rec in TSVParser(CheckInRecord).parse_file(path):
        if rec.poi_id not in pois:
            unresolved.append("row {}: {}".format(n, rec.poi_id))
            continue
        try:
            checkins.append(rec.to_checkin(owner_kind))
        except DataError as e:
            raise DataError("{} (row {})".format(e, n)) from e
    if unresolved:
        raise DataError("unresolvable poi_id", unresolved)
    return checkins


def parse_social(path: PathLike) -> SocialGraph:
    """Read social.tsv."""
    graph = SocialGraph()
    for _, rec in TSVParser(SocialRecord).parse_file(path):
        graph.add(rec.a, rec.b)
    return graph


def parse_groups(path: PathLike) -> List[Group]:
    """Read groups.tsv."""
    groups = []  # type: List[Group]
    for n, rec in TSVParser(GroupRecord).parse_file(path):
        try:
            groups.append(rec.to_group())
        except DataError as e:
            raise DataError("{} (row {})".format(e, n)) from e
    return groups


def load_dataset(
    checkins_path: PathLike, pois_path: PathLike, social_path: PathLike
) -> Tuple[CheckInTable, PoiTable, SocialGraph]:
    """Load user check-ins, POIs, and the social graph."""
    pois = parse_pois(pois_path)
    checkins = parse_checkins(checkins_path, pois)
    social = parse_social(social_path)
    logger.info(
        "Loaded %d check-ins, %d POIs, %d social edges",
        len(checkins),
        len(pois),
        len(social),
    )
    return checkins, pois, social
