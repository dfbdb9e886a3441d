"""Unit test of `corpus` module."""

import logging
import pathlib
import tempfile
import unittest

import numpy
import pytest

from llmgpr.corpus import (
    SECONDS_PER_DAY,
    build_sequences,
    candidate_set,
    dataset_stats,
    filter_sparse,
    leave_one_out,
    load_groups,
    make_split,
    member_history,
    mine_groups,
    split_by_gap,
    with_target,
    write_dataset,
    write_groups,
)
from llmgpr.dataset import CheckIn, CheckInSequence, Group, Poi, PoiTable, SocialGraph
from llmgpr.errors import UsageError
from llmgpr.parser import load_dataset

logger = logging.getLogger("test_info")

T0 = 1262304000


def line_pois(n: int = 6) -> PoiTable:
    """POIs on the equator, 0.01 degree apart."""
    return PoiTable(
        Poi("p{}".format(i), "Place {}".format(i), "Cafe", 0.0, round(0.01 * i, 2))
        for i in range(n)
    )


class TestMineGroups(unittest.TestCase):
    """Unit test of the co-visit group miner."""

    def setUp(self):
        self.social = SocialGraph([("u1", "u2"), ("u2", "u3"), ("u1", "u3")])
        self.social.add("u4", "u5")

    def test_pair(self):
        checkins = [
            CheckIn("u1", "p1", T0 + 300),
            CheckIn("u2", "p1", T0),
            CheckIn("u4", "p1", T0 + 100),  # no friend in the window
            CheckIn("u1", "p2", T0 + 10000),
            CheckIn("u2", "p2", T0 + 20000),  # outside the window
        ]
        groups, group_checkins = mine_groups(checkins, self.social, 1800)
        pair = Group.of(["u1", "u2"])
        assert groups == [pair]
        assert group_checkins == [CheckIn(pair.id, "p1", T0, "group")]

    def test_clique(self):
        checkins = [
            CheckIn("u1", "p3", T0),
            CheckIn("u2", "p3", T0 + 60),
            CheckIn("u3", "p3", T0 + 120),
            CheckIn("u1", "p4", T0 + 5000),
            CheckIn("u2", "p4", T0 + 5100),
            CheckIn("u3", "p3", T0 + 9000),
        ]
        groups, group_checkins = mine_groups(checkins, self.social, 1800)
        trio = Group.of(["u1", "u2", "u3"])
        pair = Group.of(["u1", "u2"])
        assert sorted(g.member_ids for g in groups) == [
            ("u1", "u2"),
            ("u1", "u2", "u3"),
        ]
        assert CheckIn(trio.id, "p3", T0, "group") in group_checkins
        assert CheckIn(pair.id, "p4", T0 + 5000, "group") in group_checkins
        assert len(group_checkins) == 2

    def test_earlier_stranger_does_not_split_friends(self):
        social = SocialGraph([("u2", "u3")])
        checkins = [
            CheckIn("u1", "p1", T0),
            CheckIn("u3", "p1", T0 + 1790),
            CheckIn("u2", "p1", T0 + 1850),
        ]
        pair = Group.of(["u2", "u3"])
        for rows in (checkins, checkins[1:]):
            groups, group_checkins = mine_groups(rows, social, 1800)
            assert groups == [pair]
            assert group_checkins == [CheckIn(pair.id, "p1", T0 + 1790, "group")]

    def test_order_and_noise_invariance(self):
        rng = numpy.random.default_rng(0)
        social = SocialGraph([("u1", "u2"), ("u2", "u3"), ("u3", "u4"), ("u1", "u3")])
        users = ["u1", "u2", "u3", "u4", "u5"]
        checkins = [
            CheckIn(users[int(u)], "p{}".format(int(p)), T0 + int(t))
            for u, p, t in zip(
                rng.integers(5, size=200),
                rng.integers(3, size=200),
                rng.integers(0, 40000, size=200),
            )
        ]
        expected = mine_groups(checkins, social, 1800)
        assert expected[0]
        for _ in range(5):
            order = rng.permutation(len(checkins))
            shuffled = [checkins[i] for i in order]
            assert mine_groups(shuffled, social, 1800) == expected
        # u9 has no friends, so its visits never join a group
        stranger = [CheckIn("u9", "p1", T0 + t) for t in range(0, 40000, 900)]
        noisy = checkins + stranger
        assert mine_groups(noisy, social, 1800) == expected

    def test_repeat_visit_is_one_covisit(self):
        social = SocialGraph([("u1", "u2")])
        checkins = [
            CheckIn("u1", "p1", T0),
            CheckIn("u2", "p1", T0 + 50),
            CheckIn("u1", "p1", T0 + 100),
            CheckIn("u2", "p1", T0 + 7200),
        ]
        pair = Group.of(["u1", "u2"])
        _, group_checkins = mine_groups(checkins, social, 1800)
        assert group_checkins == [CheckIn(pair.id, "p1", T0, "group")]

    def test_group_ids_are_stable(self):
        assert Group.of(["b", "a"]).id == Group.of(["a", "b"]).id
        assert Group.of(["a", "b"]).member_ids == ("a", "b")
        assert Group.of(["a", "b"]).id.startswith("g")

    def test_rejects_group_checkins(self):
        with pytest.raises(UsageError):
            mine_groups([CheckIn("g1", "p1", T0, "group")], self.social)


class TestSequences(unittest.TestCase):
    """Unit test of sequence construction and splitting."""

    def setUp(self):
        self.pois = line_pois()

    def seq(self, days, owner="u1"):
        items = [
            ("p{}".format(i % 6), T0 + int(d * SECONDS_PER_DAY))
            for i, d in enumerate(days)
        ]
        return CheckInSequence.from_items(owner, "user", items, self.pois)

    def test_build_sequences(self):
        checkins = [
            CheckIn("u2", "p0", T0 + 30),
            CheckIn("u1", "p2", T0 + 20),
            CheckIn("u1", "p1", T0 + 10),
            CheckIn("u1", "p3", T0 + 40),
            CheckIn("g1", "p0", T0, "group"),
        ]
        seqs = build_sequences(checkins, self.pois, max_len=2)
        assert [s.sequence_id for s in seqs] == ["group:g1", "user:u1", "user:u2"]
        u1 = seqs[1]
        assert u1.items == (("p2", T0 + 20), ("p3", T0 + 40))
        assert u1.temporal_deltas == (0, 20)
        assert u1.spatial_deltas[0] == 0.0
        assert u1.spatial_deltas[1] == pytest.approx(1.11195, rel=1e-4)

    def test_slice_resets_deltas(self):
        s = self.seq([0, 1, 2, 3])
        tail = s.slice(2)
        assert tail.poi_ids == ["p2", "p3"]
        assert tail.temporal_deltas == (0, SECONDS_PER_DAY)
        assert tail.spatial_deltas[0] == 0.0

    def test_split_by_gap(self):
        s = self.seq([0, 1, 2, 8, 9])
        parts = split_by_gap(s, 5.0)
        assert [len(p) for p in parts] == [3, 2]
        assert [p.sequence_id for p in parts] == ["user:u1#1", "user:u1#2"]
        assert parts[1].temporal_deltas == (0, SECONDS_PER_DAY)
        assert split_by_gap(s, 6.0) == [s]  # the cut needs a strictly longer gap
        with pytest.raises(UsageError):
            split_by_gap(s, 0)

    def test_leave_one_out(self):
        s = self.seq([0, 1, 2, 3])
        parts = leave_one_out(s)
        assert parts is not None
        train, val, test = parts
        assert train.poi_ids == ["p0", "p1"]
        assert val.prefix == train and val.target == "p2"
        assert val.target_timestamp == T0 + 2 * SECONDS_PER_DAY
        assert test.prefix.poi_ids == ["p0", "p1", "p2"]
        assert test.target == "p3"
        assert test.sequence_id == "user:u1"
        assert leave_one_out(self.seq([0, 1])) is None

    def test_make_split(self):
        seqs = [self.seq([0, 1, 2, 3], "u1"), self.seq([0, 1, 2], "u2")]
        seqs.append(self.seq([0, 1], "u3"))
        split = make_split(seqs, cold_start_ids=["user:u2"])
        assert [s.owner_id for s in split.train] == ["u1"]
        assert [c.target for c in split.test] == ["p3"]
        assert [c.target for c in split.cold_start] == ["p2"]
        assert split.test_of("group") == []
        assert split.validation_of("user") == split.validation

    def test_make_split_brute_force(self):
        rng = numpy.random.default_rng(1)
        seqs = [
            self.seq(sorted(rng.uniform(0, 30, size=int(m))), "u{}".format(i))
            for i, m in enumerate(rng.integers(1, 9, size=60))
        ]
        cold = {s.sequence_id for s in seqs[::7]}
        split = make_split(seqs, cold_start_ids=cold)
        train, val, test, cold_cases = [], [], [], []
        for s in seqs:
            items = list(s.items)
            if len(items) < 3:
                continue
            if s.sequence_id in cold:
                cold_cases.append((items[:-1], items[-1]))
                continue
            train.append(items[:-2])
            test.append((items[:-1], items[-1]))
            val.append((items[:-2], items[-2]))

        def cases(got):
            return [(list(c.prefix.items), (c.target, c.target_timestamp)) for c in got]

        assert [list(s.items) for s in split.train] == train
        assert cases(split.validation) == val
        assert cases(split.test) == test
        assert cases(split.cold_start) == cold_cases

    def test_member_history(self):
        s = self.seq([0, 1, 2, 3])
        h = member_history(s, T0 + 2 * SECONDS_PER_DAY)
        assert h.poi_ids == ["p0", "p1"]
        assert len(member_history(s, T0)) == 0


class TestCandidates(unittest.TestCase):
    """Unit test of the candidate generator."""

    def setUp(self):
        self.pois = PoiTable(
            [
                Poi("c", "C", "Cafe", 0.0, 0.0),
                Poi("b", "B", "Cafe", 0.0, 0.01),
                Poi("a", "A", "Cafe", 0.0, -0.01),
                Poi("d", "D", "Cafe", 0.02, 0.0),
                Poi("e", "E", "Cafe", 0.0, 0.05),
            ]
        )

    def test_tie_break_by_id(self):
        assert candidate_set(self.pois, "c", ["c"], 3) == ["a", "b", "d"]
        assert candidate_set(self.pois, "c", ["c", "a"], 2) == ["b", "d"]

    def test_brute_force(self):
        for anchor in self.pois:
            for h in (1, 2, 4, 10):
                visited = [anchor]
                expected = sorted(
                    (p for p in self.pois if p not in visited),
                    key=lambda p: (self.pois.distance_km(anchor, p), p),
                )[:h]
                assert candidate_set(self.pois, anchor, visited, h) == expected

    def test_brute_force_large(self):
        rng = numpy.random.default_rng(2)
        cells = rng.integers(0, 20, size=(700, 2))
        pois = PoiTable(
            Poi("q{:03d}".format(i), "Q", "Cafe", 40.0 + 0.01 * a, 0.01 * b)
            for i, (a, b) in enumerate(cells)
        )
        ids = list(pois)
        for _ in range(5):
            anchor = ids[int(rng.integers(len(ids)))]
            picks = rng.choice(len(ids), size=int(rng.integers(1, 100)), replace=False)
            visited = {anchor} | {ids[int(i)] for i in picks}
            got = candidate_set(pois, anchor, visited, 500)
            rest = [p for p in ids if p not in visited]
            assert len(got) == min(500, len(rest)) and len(set(got)) == len(got)
            assert not visited & set(got)
            dist = {p: pois.distance_km(anchor, p) for p in rest}

            def before(a, b):
                if abs(dist[a] - dist[b]) <= 1e-9:
                    return a < b
                return dist[a] < dist[b]

            for a, b in zip(got, got[1:]):
                assert before(a, b)
            for p in set(rest) - set(got):
                assert before(got[-1], p)

    def test_all_visited(self):
        assert candidate_set(self.pois, "c", list(self.pois), 5) == []
        with pytest.raises(UsageError):
            candidate_set(self.pois, "c", [], 0)

    def test_with_target(self):
        assert with_target(["a", "b"], "b") == ["a", "b"]
        assert with_target(["a", "b"], "e") == ["a", "b", "e"]


class TestPreprocessing(unittest.TestCase):
    """Unit test of filtering, statistics, and data files."""

    def setUp(self):
        self.pois = line_pois(4)

    def test_filter_sparse(self):
        checkins = [CheckIn("u1", "p0", T0 + i) for i in range(3)]
        checkins += [CheckIn("u2", "p0", T0)]
        checkins += [CheckIn("u2", "p1", T0 + 10)]
        checkins += [CheckIn("u3", "p2", T0 + i) for i in range(2)]
        rows, pois = filter_sparse(checkins, self.pois, 2)
        # p1 goes first, then u2 drops to one check-in, then p0 keeps u1 only
        assert {c.owner_id for c in rows} == {"u1", "u3"}
        assert list(pois) == ["p0", "p2"]
        rows, pois = filter_sparse(checkins, self.pois, 1)
        assert len(rows) == len(checkins) and pois is self.pois

    def test_dataset_stats(self):
        checkins = [CheckIn("u1", "p0", T0), CheckIn("u2", "p1", T0)]
        checkins.append(CheckIn("u1", "p2", T0 + 1))
        group = Group.of(["u1", "u2"])
        stats = dataset_stats(
            checkins, [group], [CheckIn(group.id, "p0", T0, "group")], self.pois
        )
        assert stats.as_dict() == {
            "users": 2,
            "groups": 1,
            "pois": 4,
            "categories": 1,
            "user_checkins": 3,
            "group_checkins": 1,
            "checkins_per_user": 1.5,
            "checkins_per_group": 1.0,
            "users_per_group": 2.0,
        }

    def test_write_and_load(self):
        checkins = [CheckIn("u1", "p0", T0), CheckIn("u2", "p3", T0 + 5)]
        social = SocialGraph([("u2", "u1")])
        group = Group.of(["u1", "u2"])
        group_checkins = [CheckIn(group.id, "p0", T0, "group")]
        with tempfile.TemporaryDirectory() as tmp:
            d = pathlib.Path(tmp) / "data"
            write_dataset(d, checkins, self.pois, social)
            write_groups(d, [group], group_checkins)
            c2, p2, s2 = load_dataset(
                d / "checkins.tsv", d / "pois.tsv", d / "social.tsv"
            )
            g2, gc2 = load_groups(d, p2)
        assert c2 == checkins
        assert list(p2.values()) == list(self.pois.values())
        assert s2.sorted_edges() == [("u1", "u2")]
        assert g2 == [group]
        assert gc2 == group_checkins
