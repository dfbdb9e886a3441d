"""Unit test of `purpose` module."""

import json
import logging
import pathlib
import tempfile
import unittest

import httpx
import pytest
import torch

from llmgpr.config import Config
from llmgpr.dataset import Poi, PoiTable
from llmgpr.errors import DataError, UsageError
from llmgpr.purpose import (
    N_PURPOSES,
    PURPOSES,
    AbsLabeler,
    ExternalLabeler,
    HeuristicLabeler,
    LabeledSequence,
    RuleTable,
    SSLConfig,
    init_purpose_matrix,
    label_histogram,
    label_sequences,
    parse_purpose_reply,
    render_purpose_prompt,
    score_purposes,
    sequence_digest,
)
from llmgpr.tests.tiny import HOUR, T0, tiny_sequence

logger = logging.getLogger("test_info")

SATURDAY = T0 + 24 * HOUR


def city() -> PoiTable:
    return PoiTable(
        [
            Poi("r1", "Noodle Bar", "Restaurant", 40.75, -73.99),
            Poi("m1", "Galleria", "Shopping Mall", 40.76, -73.98),
            Poi("o1", "Tower 1", "Office", 40.71, -74.01),
            Poi("h1", "Flat 2B", "Residence", 40.73, -73.95),
            Poi("t1", "Grand Hotel", "Hotel", 40.72, -74.00),
            Poi("x1", "Unknown Spot", "Thing", 40.70, -73.90),
        ]
    )


class TestHeuristicLabeler(unittest.TestCase):
    """Unit test of the rule-table labeler."""

    def setUp(self):
        self.pois = city()
        self.labeler = HeuristicLabeler()

    def label(self, poi_ids, start, step=HOUR):
        seq = tiny_sequence("u1", poi_ids, self.pois, start=start, step=step)
        return self.labeler.label(seq, self.pois).purpose

    def test_classes(self):
        rules = self.labeler.rules
        assert rules.class_of("Shopping Mall") == "food_shopping"
        assert rules.class_of("Art Gallery") == "culture"
        assert rules.class_of("Train Station") == "transit"
        assert rules.class_of("Thing") is None

    def test_shopping_and_dining(self):
        assert self.label(["r1", "m1"], T0 + 12 * HOUR) == "Shopping & Dining"

    def test_daily_commute(self):
        # Friday 08:00 at the office, 18:00 at home
        assert self.label(["o1", "h1"], T0 + 8 * HOUR, 10 * HOUR) == "Daily Commute"

    def test_work_commute(self):
        assert self.label(["o1", "o1", "r1"], T0 + 11 * HOUR) == "Work Commute"

    def test_business_trip(self):
        assert self.label(["o1", "t1"], SATURDAY + 12 * HOUR) == "Business Trip"

    def test_default(self):
        assert self.label(["x1"], T0) == "Daily Commute"

    def test_features(self):
        seq = tiny_sequence("u1", ["o1", "h1"], self.pois, T0 + 8 * HOUR, 10 * HOUR)
        f = self.labeler.rules.features(seq, self.pois)
        assert f.classes == frozenset(["work", "home"])
        assert f.commute_share == 1.0
        assert f.weekday_share == 1.0 and f.weekend_share == 0.0
        assert f.duration_hours == 10.0
        assert f.span_km > 0
        with pytest.raises(UsageError):
            self.labeler.rules.features(seq.slice(0, 0), self.pois)

    def test_bad_tables(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / "rules.yaml"
            path.write_text(
                "classes: {work: [office]}\nrules:\n"
                "  - label: Stargazing\n    when: {dominant: work}\n",
                encoding="utf-8",
            )
            with pytest.raises(DataError):
                RuleTable.load(path)
            path.write_text(
                "classes: {work: [office]}\nrules:\n"
                "  - label: Tourism\n    when: {dominant: beach}\n",
                encoding="utf-8",
            )
            with pytest.raises(DataError):
                RuleTable.load(path)
            path.write_text(
                "classes: {work: [office]}\nrules:\n"
                "  - label: Tourism\n    when: {moon_phase: 1}\n",
                encoding="utf-8",
            )
            with pytest.raises(DataError):
                RuleTable.load(path)
        with pytest.raises(UsageError):
            RuleTable.load("/nonexistent/rules.yaml")


def reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


class TestExternalLabeler(unittest.TestCase):
    """Unit test of the chat-completion labeler with a mock transport."""

    def setUp(self):
        self.pois = city()
        self.seq = tiny_sequence("u1", ["r1", "m1"], self.pois, T0 + 12 * HOUR)
        self.requests = []

    def labeler(self, handler, retries=2):
        def record(request):
            self.requests.append(request)
            return handler(request)

        client = httpx.Client(transport=httpx.MockTransport(record))
        return ExternalLabeler(
            "https://labels.test/v1/chat",
            "tiny-model",
            api_key="secret",
            retries=retries,
            max_workers=2,
            client=client,
            base_delay=0.0,
        )

    def test_reply(self):
        labeler = self.labeler(
            lambda r: httpx.Response(
                200, json=reply("This sequence is classified as [Tourism].")
            )
        )
        labeled = labeler.label(self.seq, self.pois)
        assert labeled.purpose == "Tourism"
        assert labeled.source == "external"
        assert len(self.requests) == 1
        request = self.requests[0]
        assert request.headers["Authorization"] == "Bearer secret"
        body = json.loads(request.content)
        assert body["model"] == "tiny-model"
        assert "Noodle Bar" in body["messages"][0]["content"]

    def test_fallback_on_errors(self):
        labeler = self.labeler(lambda r: httpx.Response(503), retries=3)
        labeled = labeler.label(self.seq, self.pois)
        assert labeled.purpose == "Shopping & Dining"
        assert labeled.source == "heuristic"
        assert len(self.requests) == 3

    def test_fallback_on_unknown_label(self):
        labeler = self.labeler(
            lambda r: httpx.Response(200, json=reply("classified as [Stargazing].")),
        )
        labeled = labeler.label_all([self.seq, self.seq.slice(1)], self.pois)
        assert [ls.source for ls in labeled] == ["heuristic", "heuristic"]
        assert len(self.requests) == 2

    def test_invalid(self):
        with pytest.raises(UsageError):
            ExternalLabeler("https://labels.test", "m", api_key="k", retries=0)


class TestPrompts(unittest.TestCase):
    """Unit test of purpose prompts and replies."""

    def test_parse_reply(self):
        assert parse_purpose_reply(
            "This sequence is classified as [Shopping & Dining]."
        ) == PURPOSES.index("Shopping & Dining")
        assert parse_purpose_reply("It is classified as tourism.") == PURPOSES.index(
            "Tourism"
        )
        assert parse_purpose_reply("classified as [Medical  &  Health Visits]") == (
            PURPOSES.index("Medical & Health Visits")
        )
        assert parse_purpose_reply("classified as [Stargazing].") is None
        assert parse_purpose_reply("no idea") is None

    def test_render(self):
        pois = city()
        seq = tiny_sequence("u1", ["r1", "m1"], pois, T0)
        text = render_purpose_prompt(seq, pois)
        assert "{Business Trip, Work Commute," in text
        assert "(r1, Noodle Bar, Restaurant, -73.9900, 40.7500, 0, 0.00)" in text
        assert "(m1, Galleria, Shopping Mall, -73.9800, 40.7600, 3600, " in text


class CountingLabeler(AbsLabeler):
    source = "heuristic"

    def __init__(self):
        self.calls = 0

    def label(self, sequence, pois):
        self.calls += 1
        return LabeledSequence(sequence, PURPOSES.index("Tourism"), self.source)


class TestLabelCache(unittest.TestCase):
    """Unit test of `label_sequences` and the label cache."""

    def test_cache(self):
        pois = city()
        a = tiny_sequence("u1", ["r1", "m1"], pois, T0)
        b = tiny_sequence("u2", ["o1", "h1"], pois, T0)
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / "labels.tsv"
            first = CountingLabeler()
            labeled = label_sequences([a], pois, first, path)
            assert first.calls == 1
            row = "user:u1\tTourism\theuristic\theuristic\t" + sequence_digest(a)
            assert path.read_text(encoding="utf-8") == row + "\n"
            second = CountingLabeler()
            labeled = label_sequences([a, b], pois, second, path)
            assert second.calls == 1
            assert [ls.purpose for ls in labeled] == ["Tourism", "Tourism"]
            assert len(path.read_text(encoding="utf-8").splitlines()) == 2
        histogram = label_histogram(labeled)
        assert list(histogram) == list(PURPOSES)
        assert histogram["Tourism"] == 2 and sum(histogram.values()) == 2

    def test_cache_invalidation(self):
        pois = city()
        a = tiny_sequence("u1", ["r1", "m1"], pois, T0)
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / "labels.tsv"
            label_sequences([a], pois, HeuristicLabeler(), path)
            # a labeler with another identity relabels
            other = CountingLabeler()
            assert label_sequences([a], pois, other, path)[0].purpose == "Tourism"
            assert other.calls == 1
            assert "\theuristic:v" not in path.read_text(encoding="utf-8")
            # the same id with changed content relabels
            changed = tiny_sequence("u1", ["r1", "o1"], pois, T0)
            again = CountingLabeler()
            label_sequences([changed], pois, again, path)
            assert again.calls == 1
            label_sequences([changed], pois, again, path)
            assert again.calls == 1
            # rows of an older layout are never reused
            path.write_text("user:u1\tTourism\theuristic\n", encoding="utf-8")
            label_sequences([changed], pois, again, path)
            assert again.calls == 2

    def test_identity(self):
        table = RuleTable.load()
        heuristic = HeuristicLabeler(table)
        assert heuristic.identity.startswith("heuristic:v")
        assert heuristic.identity == HeuristicLabeler(RuleTable.load()).identity
        fewer = RuleTable(table.classes, table.rules[1:], table.default, table.version)
        assert HeuristicLabeler(fewer).identity != heuristic.identity
        a = tiny_sequence("u1", ["r1", "m1"], city(), T0)
        assert sequence_digest(a) == sequence_digest(a.slice(0))
        assert sequence_digest(a) != sequence_digest(a.slice(1))

    def test_labeled_sequence(self):
        seq = tiny_sequence("u1", ["r1"], city(), T0)
        with pytest.raises(DataError):
            LabeledSequence(seq, N_PURPOSES)


class TestPurposeScoring(unittest.TestCase):
    """Unit test of purpose logits and configuration."""

    def test_scores(self):
        m = init_purpose_matrix(8, seed=1)
        assert m.shape == (N_PURPOSES, 8)
        assert torch.equal(m, init_purpose_matrix(8, seed=1))
        e = torch.randn(3, 8)
        assert torch.allclose(score_purposes(m, e)[1], m @ e[1])
        with pytest.raises(UsageError):
            score_purposes(m, torch.ones(4))
        with pytest.raises(UsageError):
            score_purposes(m[:3], torch.ones(8))

    def test_config(self):
        config = Config(files=[])
        ssl = SSLConfig.from_section(config["ssl"])
        assert isinstance(ssl.make_labeler(), HeuristicLabeler)
        config.set_override("ssl.labeler=external")
        ssl = SSLConfig.from_section(config["ssl"])
        transport = httpx.MockTransport(lambda r: httpx.Response(500))
        client = httpx.Client(transport=transport)
        labeler = ssl.make_labeler(client)
        assert isinstance(labeler, ExternalLabeler)
        assert labeler.model == "gpt-4"
