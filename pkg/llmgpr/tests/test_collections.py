"""Unit test of `_collections` module."""

import logging
import unittest
from typing import Any

import pytest

from llmgpr._collections import OrderedIdDict, UniqueIdDict
from llmgpr.errors import DataError

logger = logging.getLogger("test_info")


class TestOrderedIdDict(unittest.TestCase):
    """Unit test of `OrderedIdDict`."""

    def setUp(self):
        self.d = OrderedIdDict()  # type: OrderedIdDict[Any, Any]
        self.d["p1"] = 10
        self.d[" p2 "] = 20
        self.d[3] = "three"

    def test_normalization(self):
        assert self.d["p1"] == 10
        assert self.d[" p1"] == 10
        assert self.d["p2"] == 20
        assert self.d[3] == "three"
        assert list(self.d.keys()) == ["p1", "p2", 3]
        assert "p2\t" in self.d
        assert "P2" not in self.d  # ids are case-sensitive

    def test_get_and_pop(self):
        assert self.d.get(" p2") == 20
        assert self.d.get("missing") is None
        assert self.d.pop(" p1 ") == 10
        assert self.d.pop("p1", "gone") == "gone"
        with pytest.raises(KeyError):
            self.d.pop("p1")

    def test_delete(self):
        del self.d[" p2"]
        assert list(self.d.keys()) == ["p1", 3]


class TestUniqueIdDict(unittest.TestCase):
    """Unit test of `UniqueIdDict`."""

    def test_duplicate(self):
        d = UniqueIdDict([("a", 1), ("b", 2)])  # type: UniqueIdDict[str, int]
        assert list(d.items()) == [("a", 1), ("b", 2)]
        with pytest.raises(DataError) as e:
            d[" a"] = 3
        assert e.value.rows == ["a"]
        assert e.value.exit_code == 2
        assert d["a"] == 1
