"""Tests of the command-line interface."""

import json
import logging
import pathlib
import tempfile
import unittest

import coloredlogs
from click.testing import CliRunner

import llmgpr
from llmgpr.script import cli, run

logger = logging.getLogger("test_info")

TINY_CFG = """[data]
n_users = 12
n_pois = 40
n_clusters = 3
checkins_per_user = 20
group_rate = 0.5
candidates = 10

[model]
d = 8
n_layers = 1
n_heads = 2
ff_width = 16
dropout = 0
min_freq = 1
pretrain_epochs = 1
pretrain_batch = 8

[qlora]
r = 2

[train]
batch = 8
max_epochs = 1
patience = 1
dropout = 0
"""


class TestScript(unittest.TestCase):
    """Test class of the `llmgpr` command."""

    def setUp(self):
        coloredlogs.set_level(40)
        self.runner = CliRunner()
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self.tmp.name)
        self.cfg = self.dir / "tiny.cfg"
        self.cfg.write_text(TINY_CFG, encoding="utf-8")

    def tearDown(self):
        self.tmp.cleanup()

    def llmgpr(self, run_dir, *args):
        base = ["--run-dir", str(self.dir / run_dir), "--config", str(self.cfg)]
        return run(base + list(args))

    def test_help(self):
        result = self.runner.invoke(cli, ["train-agg", "--help"])
        assert result.exit_code == 0
        assert "train.alpha" in result.output
        assert "qlora.r" in result.output
        assert "--flags" in result.output
        result = self.runner.invoke(cli, ["-h"])
        assert result.exit_code == 0
        for command in ["synth", "pretrain-ssl", "train-seq", "eval", "sweep"]:
            assert command in result.output

    def test_version(self):
        result = self.runner.invoke(cli, ["-V"])
        assert result.exit_code == 0
        assert llmgpr.__version__ in result.output

    def test_usage_errors(self):
        assert self.llmgpr("a", "synth", "data.bogus=1") == 1
        assert self.llmgpr("a", "synth", "no-dot=1") == 1
        assert self.llmgpr("a", "eval", "--flags", "ssl=maybe") == 1
        assert self.llmgpr("a", "no-such-command") == 1
        # stages refuse to start without the checkpoints they build on
        assert self.llmgpr("a", "train-agg") == 1
        assert self.llmgpr("a", "mine-groups") == 1

    def test_data_error(self):
        checkins = self.dir / "checkins.tsv"
        pois = self.dir / "pois.tsv"
        social = self.dir / "social.tsv"
        checkins.write_text("u1\tp7\t1262304000\n", encoding="utf-8")
        pois.write_text("p1\tBlue Cafe\tCafe\t40.75\t-73.99\n", encoding="utf-8")
        social.write_text("u1\tu2\n", encoding="utf-8")
        code = self.llmgpr("b", "ingest", str(checkins), str(pois), str(social))
        assert code == 2

    def test_synth_deterministic(self):
        assert self.llmgpr("s1", "--seed", "3", "synth") == 0
        assert self.llmgpr("s2", "--seed", "3", "synth") == 0
        assert self.llmgpr("s3", "--seed", "4", "synth") == 0
        text = {
            d: (self.dir / d / "data" / "checkins.tsv").read_text(encoding="utf-8")
            for d in ("s1", "s2", "s3")
        }
        assert text["s1"] == text["s2"]
        assert text["s1"] != text["s3"]
        manifest = json.loads((self.dir / "s1" / "run_manifest.json").read_text())
        assert manifest["synth"]["config"]["train"]["seed"] == "3"
        assert manifest["synth"]["config"]["data"]["n_users"] == "12"

    def test_pipeline(self):
        assert self.llmgpr("p", "synth") == 0
        assert self.llmgpr("p", "pipeline") == 0
        path = self.dir / "p"
        for name in ["stats.json", "groups.tsv", "group_checkins.tsv"]:
            assert (path / "data" / name).is_file()
        assert (path / "labels.tsv").is_file()
        for tag in ["base", "poi-init", "r2/ssl", "r2/seq", "r2/agg-seq-alpha0.7"]:
            assert (path / "checkpoints" / tag / "manifest.json").is_file()
        logs = (path / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
        stages = {json.loads(line)["stage"] for line in logs}
        assert stages == {"ssl", "sequencing", "aggregation"}

        # the fusion-off variant reuses the sequencing checkpoint
        assert self.llmgpr("p", "eval", "--flags", "fusion=off") == 0
        report = json.loads((path / "report.json").read_text(encoding="utf-8"))
        assert set(report["variants"]) == {"LLMGPR", "LLMGPR-ER"}
        for row in report["rows"]:
            for k in (5, 10):
                assert 0.0 <= row["HR@{}".format(k)] <= 1.0
                assert row["NDCG@{}".format(k)] <= row["HR@{}".format(k)] + 1e-12
        header = (path / "report.tsv").read_text(encoding="utf-8").splitlines()[0]
        assert header.split("\t")[:4] == ["variant", "owner_kind", "split", "n"]

        args = ["--run-dir", str(path), "--config", str(self.cfg), "eval"]
        result = self.runner.invoke(cli, args + ["--format", "yaml"])
        assert result.exit_code == 0
        assert "type: llmgpr-report" in result.output
        assert "LLMGPR-ER" in result.output

        assert self.llmgpr("p", "recommend") == 0
        lines = (path / "recommendations.tsv").read_text().splitlines()
        assert lines
        ranks = [int(line.split("\t")[1]) for line in lines]
        assert min(ranks) == 1 and max(ranks) <= 10

    def test_report_reproducible(self):
        for run_dir in ("r1", "r2"):
            assert self.llmgpr(run_dir, "--seed", "5", "synth") == 0
            assert self.llmgpr(run_dir, "--seed", "5", "pipeline") == 0
        first, second = (
            (self.dir / d / "report.tsv").read_bytes() for d in ("r1", "r2")
        )
        assert first == second
        assert first.count(b"\n") > 1
