"""Unit test of `dumper` module."""

import json
import logging
import pathlib
import tempfile
import unittest

import ruamel.yaml

from llmgpr.dumper import (
    JSONDumper,
    ReportFormat,
    TSVDumper,
    YAMLDumper,
    dumper_for,
    tsv_rows,
    write_records,
)
from llmgpr.record import RecommendationRecord

logger = logging.getLogger("test_info")

REPORT = {
    "rows": [
        {
            "variant": "LLMGPR",
            "owner_kind": "group",
            "split": "test",
            "n": 3,
            "HR@5": 2 / 3,
            "NDCG@5": 0.5,
            "HR@10": 1.0,
            "NDCG@10": 0.55,
        },
        {"variant": "LLMGPR-ER", "owner_kind": "user", "split": "test", "n": 0},
    ],
    "variants": {"LLMGPR": {"flags": "", "alpha": 0.7, "ranks": (1, 2, 9)}},
}


class TestDumper(unittest.TestCase):
    """Unit test of report dumpers."""

    def test_tsv(self):
        lines = TSVDumper().dump(REPORT).splitlines()
        assert lines[0] == "variant\towner_kind\tsplit\tn\tHR@5\tNDCG@5\tHR@10\tNDCG@10"
        assert lines[1] == "LLMGPR\tgroup\ttest\t3\t0.6667\t0.5000\t1.0000\t0.5500"
        assert lines[2] == "LLMGPR-ER\tuser\ttest\t0\t\t\t\t"
        narrow = TSVDumper(precision=2, columns=["variant", "HR@5"]).dump(REPORT)
        assert narrow == "variant\tHR@5\nLLMGPR\t0.67\nLLMGPR-ER\t\n"

    def test_marshal(self):
        data = json.loads(JSONDumper().dump(REPORT))
        assert list(data) == ["format", "rows", "variants"]
        assert data["format"] == {"type": "llmgpr-report", "scheme": 1}
        assert data["variants"]["LLMGPR"]["ranks"] == [1, 2, 9]
        assert data["rows"][0]["HR@5"] == REPORT["rows"][0]["HR@5"]

        data = ruamel.yaml.YAML(typ="safe").load(YAMLDumper().dump(REPORT))
        assert data["format"]["type"] == "llmgpr-report"
        assert data["rows"][1] == REPORT["rows"][1]
        assert data["variants"]["LLMGPR"]["alpha"] == 0.7

    def test_dumper_for(self):
        assert isinstance(dumper_for(ReportFormat.TSV), TSVDumper)
        assert isinstance(dumper_for(ReportFormat.JSON, indent=0), JSONDumper)
        assert isinstance(dumper_for(ReportFormat.YAML), YAMLDumper)

    def test_plain_tables(self):
        assert tsv_rows(["a", "b"], [[1, "x"], [2.5, "y"]]) == "a\tb\n1\tx\n2.5\ty\n"
        assert tsv_rows(["a"], []) == "a\n"
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / "out.tsv"
            rows = [RecommendationRecord("g1", 1, "p3", 0.25)]
            assert write_records(path, rows) == 1
            assert path.read_text(encoding="utf-8") == "g1\t1\tp3\t0.250000\n"
            assert write_records(path, []) == 0
            assert path.read_text(encoding="utf-8") == ""
