"""Synthetic check-in corpora with a planted preference signal.

Users are partitioned into preference clusters. Each cluster has a home
neighborhood and a theme (a handful of POI categories). A user's next POI is
drawn from the cluster theme with probability `preference`, favoring POIs near
the previous one and the user's own favorites; otherwise it is drawn from the
POIs outside the theme. Friends inside a cluster occasionally check in
together, which plants group co-visits for `corpus.mine_groups`.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy

from llmgpr._geo import haversine_km
from llmgpr.dataset import CheckIn, CheckInTable, Poi, PoiTable, SocialGraph
from llmgpr.errors import UsageError

logger = logging.getLogger(__name__)

THEMES = [
    ["Restaurant", "Cafe", "Shopping Mall"],
    ["Museum", "Theater", "Art Gallery"],
    ["Gym", "Yoga Studio", "Sports Club"],
    ["University", "Library", "Training Center"],
    ["Office", "Coworking Space", "Conference Center"],
    ["Bar", "Nightclub", "Event Venue"],
    ["Hotel", "Landmark", "Scenic Lookout"],
    ["Hospital", "Clinic", "Pharmacy"],
]  # type: Sequence[Sequence[str]]
BACKGROUND = ["Residence", "Train Station", "Gas Station", "Bank"]

CITY_CENTER = (40.7484, -73.9857)
SLOT_SECONDS = 6 * 3600
JITTER_SECONDS = 2 * 3600
COVISIT_OFFSET_SECONDS = 600
GAP_SECONDS = 6 * 86400
START_TIMESTAMP = 1262304000  # 2010-01-01T00:00:00Z


@dataclass(frozen=True)
class SyntheticConfig:
    """Sizes and rates of a synthetic corpus."""

    n_users: int = 200
    n_pois: int = 300
    n_clusters: int = 5
    checkins_per_user: int = 50
    group_rate: float = 0.1
    preference: float = 0.8
    friend_rate: float = 0.3
    gap_rate: float = 0.05
    favorites: int = 8

    def __post_init__(self) -> None:
        for name in ("n_users", "n_pois", "n_clusters", "checkins_per_user"):
            if getattr(self, name) <= 0:
                raise UsageError("{} must be positive".format(name))
        if self.n_clusters > self.n_users:
            raise UsageError("n_clusters must not exceed n_users")
        if self.n_pois < 2 * self.n_clusters:
            raise UsageError("n_pois must be at least twice n_clusters")
        for name in ("group_rate", "preference", "friend_rate", "gap_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UsageError("{} must be in [0, 1]".format(name))

    @classmethod
    def from_section(cls, section: Any) -> "SyntheticConfig":
        """Build from the synthetic-corpus keys of a `[data]` section."""
        return cls(
            n_users=section.get_int("n_users"),
            n_pois=section.get_int("n_pois"),
            n_clusters=section.get_int("n_clusters"),
            checkins_per_user=section.get_int("checkins_per_user"),
            group_rate=section.get_float("group_rate"),
        )


def theme_of(cluster: int) -> Sequence[str]:
    """Return the preferred categories of a cluster."""
    return THEMES[cluster % len(THEMES)]


def _make_pois(cfg: SyntheticConfig, rng: numpy.random.Generator) -> PoiTable:
    centers = numpy.array(CITY_CENTER) + rng.uniform(-0.15, 0.15, (cfg.n_clusters, 2))
    pois = PoiTable()
    for i in range(cfg.n_pois):
        cluster = i % cfg.n_clusters
        if rng.random() < 0.7:
            theme = theme_of(cluster)
            category = theme[int(rng.integers(len(theme)))]
        else:
            category = BACKGROUND[int(rng.integers(len(BACKGROUND)))]
        lat, lon = centers[cluster] + rng.normal(0.0, 0.01, 2)
        pois.add(
            Poi(
                id="p{:04d}".format(i),
                name="{} {}".format(category, i),
                category=category,
                lat=round(float(lat), 6),
                lon=round(float(lon), 6),
                address="{} Synthetic Avenue".format(100 + i),
                description=None if i % 3 else "A {} in district {}".format(
                    category.lower(), cluster
                ),
            )
        )
    return pois


def _make_social(
    cfg: SyntheticConfig, members: Dict[int, List[str]], rng: numpy.random.Generator
) -> SocialGraph:
    social = SocialGraph()
    for cluster in sorted(members):
        users = members[cluster]
        for a in range(len(users)):
            for b in range(a + 1, len(users)):
                if rng.random() < cfg.friend_rate:
                    social.add(users[a], users[b])
        for u in users:
            if len(users) > 1 and not social.neighbors(u):
                v = users[int(rng.integers(len(users)))]
                if v == u:
                    v = users[(users.index(u) + 1) % len(users)]
                social.add(u, v)
    all_users = [u for c in sorted(members) for u in members[c]]
    n_cross = max(1, len(all_users) // 20)
    for _ in range(n_cross):
        a, b = rng.choice(len(all_users), 2, replace=False)
        social.add(all_users[int(a)], all_users[int(b)])
    return social


def generate_synthetic(
    config: SyntheticConfig, seed: int
) -> Tuple[CheckInTable, PoiTable, SocialGraph]:
    """Generate (user check-ins, POIs, social graph); deterministic in `seed`."""
    cfg = config
    rng = numpy.random.default_rng(seed)
    pois = _make_pois(cfg, rng)
    ids, lat, lon = pois.arrays()
    categories = numpy.array([pois[i].category for i in ids])

    users = ["u{:04d}".format(i) for i in range(cfg.n_users)]
    cluster_of = {u: i % cfg.n_clusters for i, u in enumerate(users)}
    members = {}  # type: Dict[int, List[str]]
    for u in users:
        members.setdefault(cluster_of[u], []).append(u)
    social = _make_social(cfg, members, rng)

    preferred = {}  # type: Dict[int, numpy.ndarray]
    others = {}  # type: Dict[int, numpy.ndarray]
    for c in range(cfg.n_clusters):
        mask = numpy.isin(categories, list(theme_of(c)))
        preferred[c] = numpy.flatnonzero(mask)
        others[c] = numpy.flatnonzero(~mask)
        if not len(preferred[c]) or not len(others[c]):
            raise UsageError("too few POIs to populate cluster {}".format(c))

    # a shared calendar keeps co-visits in chronological order for every user
    n = cfg.checkins_per_user
    gaps = numpy.cumsum(rng.random(n) < cfg.gap_rate) * GAP_SECONDS
    slots = START_TIMESTAMP + numpy.arange(n) * SLOT_SECONDS + gaps

    visits = {}  # type: Dict[str, List[Tuple[int, int]]]
    for u in users:
        c = cluster_of[u]
        pref = preferred[c]
        fav = rng.choice(pref, min(cfg.favorites, len(pref)), replace=False)
        boost = numpy.where(numpy.isin(pref, fav), 4.0, 1.0)
        prev = int(pref[int(rng.integers(len(pref)))])
        row = []  # type: List[Tuple[int, int]]
        for j in range(n):
            if rng.random() < cfg.preference:
                d = haversine_km(lat[prev], lon[prev], lat[pref], lon[pref])
                w = boost * numpy.exp(-numpy.asarray(d) / 3.0)
                nxt = int(pref[int(rng.choice(len(pref), p=w / w.sum()))])
            else:
                nxt = int(others[c][int(rng.integers(len(others[c])))])
            ts = int(slots[j] + rng.integers(JITTER_SECONDS))
            row.append((nxt, ts))
            prev = nxt
        visits[u] = row

    joined = set()  # type: set
    for u in users:
        friends = sorted(
            v for v in social.neighbors(u) if cluster_of[v] == cluster_of[u]
        )
        if not friends:
            continue
        for j in range(n):
            if rng.random() >= cfg.group_rate:
                continue
            v = friends[int(rng.integers(len(friends)))]
            if (v, j) in joined or (u, j) in joined:
                continue
            poi, ts = visits[u][j]
            visits[v][j] = (poi, ts + int(rng.integers(1, COVISIT_OFFSET_SECONDS)))
            joined.add((v, j))
            joined.add((u, j))

    checkins = [
        CheckIn(u, ids[p], ts) for u in users for p, ts in visits[u]
    ]  # type: CheckInTable
    logger.info(
        "Generated %d check-ins over %d POIs for %d users (%d co-visits)",
        len(checkins),
        len(pois),
        len(users),
        len(joined) // 2,
    )
    return checkins, pois, social


def preferred_share(
    checkins: Sequence[CheckIn], pois: PoiTable, n_clusters: int
) -> float:
    """Return the share of user check-ins falling in the owner's cluster theme.

    Owners are mapped to clusters the way `generate_synthetic` assigns them.
    """
    hits = 0
    for c in checkins:
        cluster = int(c.owner_id[1:]) % n_clusters
        hits += pois[c.poi_id].category in theme_of(cluster)
    return hits / len(checkins) if checkins else 0.0
