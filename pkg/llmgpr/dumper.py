"""Dumpers to write records and reports in various formats."""

import enum
import json
import pathlib
from abc import ABCMeta, abstractmethod
from collections import OrderedDict
from typing import Any, Iterable, List, Mapping, MutableMapping, Sequence, Union

import ruamel.yaml
from ruamel.yaml.compat import StringIO

from llmgpr.record import AbsRecord

PathLike = Union[str, pathlib.Path]

REPORT_COLUMNS = [
    "variant",
    "owner_kind",
    "split",
    "n",
    "HR@5",
    "NDCG@5",
    "HR@10",
    "NDCG@10",
]  # type: Sequence[str]


@enum.unique
class ReportFormat(enum.Enum):
    """Options for report output."""

    TSV = 0
    JSON = 1
    YAML = 2


def write_records(path: PathLike, records: Iterable[AbsRecord]) -> int:
    """Write records as a UTF-8 TSV file without header; return the row count."""
    lines = [r.to_tsv() for r in records]
    pathlib.Path(path).write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )
    return len(lines)


class AbsDumper(metaclass=ABCMeta):
    """Abstract class for report dumpers.

    A report is a mapping with a ``rows`` list of flat row mappings and any
    number of extra entries (details, per-sequence ranks, configuration).
    """

    def __init__(self, precision: int = 4) -> None:
        self.precision = precision

    @abstractmethod
    def dump(self, report: Mapping[str, Any]) -> str:
        """Return dumped string of a report."""

    def dump_file(self, report: Mapping[str, Any], path: PathLike) -> None:
        """Write the dumped report into a file."""
        pathlib.Path(path).write_text(self.dump(report), encoding="utf-8")

    def _format_value(self, v: Any) -> str:
        if isinstance(v, float):
            return "{:.{}f}".format(v, self.precision)
        return str(v)


class TSVDumper(AbsDumper):
    """A dumper for the variant-by-metric table."""

    def __init__(self, precision: int = 4, columns: Sequence[str] = REPORT_COLUMNS):
        super().__init__(precision)
        self.columns = list(columns)

    def dump(self, report: Mapping[str, Any]) -> str:
        """Return TSV text with a header row."""
        lines = ["\t".join(self.columns)]
        for row in report.get("rows", []):
            cells = (self._format_value(row.get(c, "")) for c in self.columns)
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


class AbsMarshalDumper(AbsDumper):
    """An abstract class for dumpers handling marshaled data."""

    SCHEME_VERSION = 1

    def marshal(self, report: Mapping[str, Any]) -> Mapping[str, Any]:
        """Return a marshaled object with a format header."""
        result = OrderedDict()  # type: MutableMapping[str, Any]
        result["format"] = OrderedDict(type="llmgpr-report", scheme=self.SCHEME_VERSION)
        for k, v in report.items():
            result[k] = _plain(v)
        return result


class JSONDumper(AbsMarshalDumper):
    """A dumper for JSON output."""

    def __init__(self, precision: int = 4, indent: int = 2) -> None:
        super().__init__(precision)
        self.indent = indent

    def dump(self, report: Mapping[str, Any]) -> str:
        """Return JSON-format text of a report."""
        return json.dumps(self.marshal(report), indent=self.indent) + "\n"


class YAMLDumper(AbsMarshalDumper):
    """A dumper for YAML output."""

    def __init__(self, precision: int = 4) -> None:
        super().__init__(precision)
        self.yaml = ruamel.yaml.YAML()
        self.yaml.default_flow_style = None
        # plain mappings rather than !!omap
        self.yaml.representer.yaml_representers[
            OrderedDict
        ] = self.yaml.representer.yaml_representers[dict]

    def dump(self, report: Mapping[str, Any]) -> str:
        """Return YAML-format text of a report."""
        stream = StringIO()
        self.yaml.dump(self.marshal(report), stream)
        return str(stream.getvalue())


def dumper_for(fmt: ReportFormat, **kw: Any) -> AbsDumper:
    """Return a dumper for the format."""
    if fmt == ReportFormat.JSON:
        return JSONDumper(**kw)
    elif fmt == ReportFormat.YAML:
        return YAMLDumper(**kw)
    return TSVDumper(**kw)


def _plain(v: Any) -> Any:
    """Convert nested containers to plain lists and dicts."""
    if isinstance(v, Mapping):
        return OrderedDict((str(k), _plain(x)) for k, x in v.items())
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if hasattr(v, "item") and callable(v.item):
        return v.item()
    return v


def tsv_rows(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Return a headed TSV text from plain rows."""
    out = ["\t".join(header)]  # type: List[str]
    for row in rows:
        out.append("\t".join(str(x) for x in row))
    return "\n".join(out) + "\n"
