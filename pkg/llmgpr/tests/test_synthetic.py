"""Unit test of `synthetic` module."""

import logging
import unittest

import pytest

from llmgpr.corpus import mine_groups
from llmgpr.errors import UsageError
from llmgpr.synthetic import SyntheticConfig, generate_synthetic, preferred_share

logger = logging.getLogger("test_info")


class TestSynthetic(unittest.TestCase):
    """Unit test of the synthetic corpus generator."""

    def setUp(self):
        self.small = SyntheticConfig(
            n_users=12, n_pois=40, n_clusters=3, checkins_per_user=20
        )

    def test_deterministic(self):
        a = generate_synthetic(self.small, seed=5)
        b = generate_synthetic(self.small, seed=5)
        c = generate_synthetic(self.small, seed=6)
        assert a[0] == b[0]
        assert list(a[1].values()) == list(b[1].values())
        assert a[2].sorted_edges() == b[2].sorted_edges()
        assert a[0] != c[0]

    def test_shape(self):
        checkins, pois, social = generate_synthetic(self.small, seed=0)
        assert len(checkins) == 12 * 20
        assert len(pois) == 40
        users = {"u{:04d}".format(i) for i in range(12)}
        assert {c.owner_id for c in checkins} == users
        assert all(c.poi_id in pois for c in checkins)
        assert all(social.neighbors(u) for u in ("u0000", "u0001", "u0002"))

    def test_default_corpus(self):
        config = SyntheticConfig()
        checkins, pois, social = generate_synthetic(config, seed=0)
        assert len(checkins) == 10000
        # the planted preference is recoverable from the data
        assert preferred_share(checkins, pois, config.n_clusters) > 0.7
        groups, group_checkins = mine_groups(checkins, social)
        assert groups
        assert len(group_checkins) >= len(groups)

    def test_invalid(self):
        with pytest.raises(UsageError):
            SyntheticConfig(n_users=0)
        with pytest.raises(UsageError):
            SyntheticConfig(n_users=3, n_clusters=4)
        with pytest.raises(UsageError):
            SyntheticConfig(group_rate=1.5)
