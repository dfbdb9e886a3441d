"""Unit test of `vocab` module."""

import logging
import pathlib
import tempfile
import unittest

import pytest

from llmgpr.dataset import CheckInSequence, Poi, PoiTable
from llmgpr.dumper import write_records
from llmgpr.errors import DataError, UsageError
from llmgpr.vocab import (
    BOS_ID,
    SPECIALS,
    UNK_ID,
    Vocabulary,
    build_vocab,
    encode_sequence_prompt,
    format_timestamp,
    render_poi_prompt,
    render_sequence_prompt,
    split_words,
)

logger = logging.getLogger("test_info")

T0 = 1262304000  # 2010-01-01 00:00 UTC


class TestVocabulary(unittest.TestCase):
    """Unit test of `Vocabulary`."""

    def setUp(self):
        self.pois = PoiTable(
            [
                Poi("p1", "Blue Cafe", "Cafe", 0.0, 0.0),
                Poi("p2", "City Museum", "Art Museum", 0.0, 0.01, "2 Elm St"),
            ]
        )
        self.vocab = build_vocab(
            self.pois, ["a cafe, a museum", "A CAFE <poi_p1>", "rare"], min_freq=2
        )

    def test_split_words(self):
        assert split_words("Visit <poi_p1>, then 3.5 km!") == [
            "visit",
            "<poi_p1>",
            ",",
            "then",
            "3.5",
            "km",
            "!",
        ]

    def test_build_vocab(self):
        v = self.vocab
        assert v.words == list(SPECIALS) + ["a", "cafe"]
        assert v.n_words == 6 and v.n_pois == 2 and len(v) == 8
        assert v.poi_token_id("p2") == 7
        assert v.is_poi(6) and not v.is_poi(5) and not v.is_poi(8)
        assert v.token(6) == "<poi_p1>"
        with pytest.raises(UsageError):
            v.poi_token_id("p9")
        with pytest.raises(UsageError):
            build_vocab(PoiTable(), ["a a"])

    def test_tokenize(self):
        v = self.vocab
        ids = v.tokenize("A cafe <poi_p2> museum <poi_p9>")
        assert ids == [4, 5, 7, UNK_ID, UNK_ID]
        assert v.encode("cafe")[0] == BOS_ID
        assert v.encode("cafe", bos=False) == [5]

    def test_read(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / "vocab.tsv"
            write_records(path, self.vocab.records())
            back = Vocabulary.read(path)
        assert back.words == self.vocab.words
        assert back.poi_ids == ["p1", "p2"]

    def test_invalid(self):
        with pytest.raises(DataError):
            Vocabulary(["a", "b"], [])
        with pytest.raises(DataError):
            Vocabulary(list(SPECIALS), ["p1", "p1"])


class TestPrompts(unittest.TestCase):
    """Unit test of prompt rendering."""

    def setUp(self):
        self.pois = PoiTable(
            [
                Poi("p1", "Blue Cafe", "Cafe", 0.0, 0.0),
                Poi("p2", "City Museum", "Art Museum", 0.0, 0.01, "2 Elm St"),
            ]
        )
        items = [("p1", T0), ("p2", T0 + 3600), ("p1", T0 + 7200)]
        self.seq = CheckInSequence.from_items("u1", "user", items, self.pois)
        texts = [render_sequence_prompt(self.seq)] * 2
        self.vocab = build_vocab(self.pois, texts, min_freq=2)

    def test_format_timestamp(self):
        assert format_timestamp(T0) == "2010-01-01 00:00"
        assert format_timestamp(T0 + 3600 * 25 + 60) == "2010-01-02 01:01"

    def test_poi_prompt(self):
        text = render_poi_prompt(self.pois["p2"])
        assert "Name: City Museum" in text
        assert "Category: Art Museum" in text
        assert "Address: 2 Elm St" in text
        assert "Description: unknown" in text
        assert "Latitude: 0.0000" in text
        assert "Longitude: 0.0100" in text

    def test_sequence_prompt(self):
        text = render_sequence_prompt(self.seq)
        assert text.endswith(
            "(<poi_p1>, 2010-01-01 00:00, 0, 0.00), "
            "(<poi_p2>, 2010-01-01 01:00, 3600, 1.11), "
            "(<poi_p1>, 2010-01-01 02:00, 3600, 1.11)"
        )
        described = render_sequence_prompt(self.seq, self.pois)
        assert "(art museum" in described.lower()
        assert "<poi_" not in described
        with pytest.raises(UsageError):
            render_sequence_prompt(self.seq.slice(0, 0))

    def test_prefix_ends(self):
        ids, ends = encode_sequence_prompt(self.vocab, self.seq)
        assert len(ends) == 3 and ends[-1] == len(ids)
        for j in range(3):
            prefix = self.seq.slice(0, j + 1)
            assert ids[: ends[j]] == self.vocab.encode(render_sequence_prompt(prefix))
        p2 = self.vocab.poi_token_id("p2")
        assert p2 not in ids[: ends[0]]
        assert p2 in ids[ends[0] : ends[1]]
