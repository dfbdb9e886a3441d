"""Unit test of `workspace` module on a synthetic corpus."""

import json
import logging
import pathlib
import tempfile
import unittest

import coloredlogs

from llmgpr.config import Config
from llmgpr.evaluation import AblationFlags
from llmgpr.workspace import Workspace

logger = logging.getLogger("test_info")

SMALL_CFG = """[data]
n_users = 40
n_pois = 80
n_clusters = 4
checkins_per_user = 30
group_rate = 0.5
candidates = 100

[model]
d = 32
n_layers = 2
n_heads = 2
ff_width = 64
dropout = 0
min_freq = 1
pretrain_epochs = 1
pretrain_batch = 16
pretrain_lr = 0.003

[qlora]
r = 4

[train]
lr = 0.005
batch = 16
max_epochs = 3
patience = 2
dropout = 0
"""


class TestWorkspace(unittest.TestCase):
    """Train and evaluate the full variant and its ablations end to end."""

    @classmethod
    def setUpClass(cls):
        coloredlogs.set_level(40)
        cls.tmp = tempfile.TemporaryDirectory()
        path = pathlib.Path(cls.tmp.name)
        cfg = path / "small.cfg"
        cfg.write_text(SMALL_CFG, encoding="utf-8")
        cls.ws = Workspace(path / "run", Config(files=[cfg]))
        cls.ws.synth()
        cls.result = cls.ws.pipeline(AblationFlags())

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_beats_random(self):
        rows = [r for r in self.result["rows"] if r["split"] == "test"]
        assert {r["owner_kind"] for r in rows} == {"user", "group"}
        n = sum(r["n"] for r in rows)
        assert n > 0
        hr = sum(r["HR@10"] * r["n"] for r in rows) / n
        logger.info("HR@10 over %d cases: %.4f", n, hr)
        assert hr > 10 / (100 + 1)

    def test_ablations(self):
        for text in ["fusion=off", "ssl=off", "avg=on"]:
            flags = AblationFlags.parse(text)
            self.ws.train_variant(flags)
            rows = self.ws.evaluate(flags)["rows"]
            assert {r["variant"] for r in rows} == {flags.variant}
        report = json.loads((self.ws.path / "report.json").read_text())
        expected = {"LLMGPR", "LLMGPR-ER", "LLMGPR-SSL", "LLMGPR-AVG"}
        assert expected <= set(report["variants"])
        assert report["variants"]["LLMGPR-SSL"]["flags"] == "ssl=off"

    def test_alpha_sweep(self):
        table = self.ws.sweep("alpha", [0.0, 0.5], AblationFlags())
        lines = table.splitlines()
        assert lines[0].split("\t")[:2] == ["alpha", "n"]
        assert [line.split("\t")[0] for line in lines[1:]] == ["0.0", "0.5"]
        assert (self.ws.path / "sweep_alpha.tsv").read_text() == table
        for tag in ["agg-seq-alpha0", "agg-seq-alpha0.5"]:
            assert (self.ws.path / "checkpoints" / "r4" / tag).is_dir()
