"""Synthetic confounded trip generator and the detour / switch anomaly injectors.

A hidden per-segment preference ``w`` (the confounder) drives both where
trips start and end (SD pairs drawn with probability proportional to
``w ** gamma``) and which route is taken (perturbed shortest path under the
effective cost ``length / w``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .road_graph import RoadNetwork, hop_distances, path_cost, shortest_path
from .trajectory import Dataset, SdPair, Trajectory, jaccard

PREF_FLOOR = 0.05


class WorldError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PreferenceField:
    weights: np.ndarray
    seed: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if not (np.all(np.isfinite(w)) and np.all(w > 0) and np.all(w <= 1)):
            raise ValueError("preference weights must lie in (0, 1]")


@dataclass
class WorldConfig:
    """Knobs of the generator.

    The head pairs are drawn with ``popularity_exponent`` and get
    ``trajectories_per_pair`` trips each; optional tail pairs are drawn with
    ``tail_popularity_exponent`` and get ``tail_trajectories_per_pair`` trips.
    """

    popularity_exponent: float = 3.0
    route_temperature: float = 0.1
    pairs_total: int = 60
    trajectories_per_pair: int = 100
    seed: int = 0
    tail_pairs: int = 0
    tail_trajectories_per_pair: int = 5
    tail_popularity_exponent: float = 0.0
    min_length: int = 2
    detour_band: tuple = (0.2, 2.0)
    switch_threshold: float = 0.5
    preference_smoothing: int = 0

    def __post_init__(self):
        if self.popularity_exponent < 0 or self.tail_popularity_exponent < 0:
            raise ValueError("popularity exponents must be non-negative")
        if not self.route_temperature >= 0:
            raise ValueError("route_temperature must be non-negative")
        if self.pairs_total < 1 or self.trajectories_per_pair < 1:
            raise ValueError("pairs_total and trajectories_per_pair must be positive")
        if self.preference_smoothing < 0:
            raise ValueError("preference_smoothing must be non-negative")
        if self.tail_pairs < 0 or self.tail_trajectories_per_pair < 1:
            raise ValueError("tail_pairs must be >= 0 and tail_trajectories_per_pair positive")
        lo, hi = self.detour_band
        if not 0 < lo <= hi:
            raise ValueError("detour_band must satisfy 0 < lo <= hi")
        self.detour_band = (float(lo), float(hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detour_band"] = list(self.detour_band)
        return d


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_preferences(net: RoadNetwork, seed: int, smoothing: int = 0) -> PreferenceField:
    """Weights in ``(0.05, 1]``, i.i.d. uniform when ``smoothing`` is 0.

    With ``smoothing > 0`` the raw draws are averaged over graph
    neighbourhoods that many times, then mapped back through their ranks onto
    an evenly spaced grid in ``(0.05, 1]``. The marginal stays uniform while
    nearby segments end up with similar weights (popular districts).
    """
    u = np.random.default_rng(seed).uniform(0.0, 1.0 - PREF_FLOOR, size=net.segment_count)
    if smoothing <= 0:
        return PreferenceField(1.0 - u, seed)
    x = u
    for _ in range(smoothing):
        x = np.array([(x[a] + sum(x[b] for b in net.adjacency[a])) / (1 + len(net.adjacency[a]))
                      for a in range(net.segment_count)])
    ranks = np.argsort(np.argsort(x, kind="stable"), kind="stable")
    return PreferenceField(1.0 - (1.0 - PREF_FLOOR) * ranks / net.segment_count, seed)


class _Reach:
    """Cached hop distances per source."""

    def __init__(self, net):
        self.net = net
        self._cache = {}

    def hops(self, s: int) -> np.ndarray:
        if s not in self._cache:
            self._cache[s] = hop_distances(self.net, s)
        return self._cache[s]


def sample_sd_pairs(net: RoadNetwork, pref: PreferenceField, config: WorldConfig, count: int,
                    seed=0, exponent: float | None = None, max_tries: int = 1000,
                    _reach: _Reach | None = None) -> list[SdPair]:
    """``count`` independent SD draws, endpoints weighted by ``w ** exponent``.

    Draws with equal endpoints, an unreachable destination or a route shorter
    than ``config.min_length`` segments are redrawn.
    """
    gamma = config.popularity_exponent if exponent is None else exponent
    rng = _rng(seed)
    p = pref.weights ** gamma
    p = p / p.sum()
    reach = _reach or _Reach(net)
    n = net.segment_count
    out = []
    for _ in range(count):
        for _attempt in range(max_tries):
            s, d = rng.choice(n, size=2, p=p)
            if s == d:
                continue
            h = reach.hops(int(s))[d]
            if h < 0 or h + 1 < config.min_length:
                continue
            out.append(SdPair(int(s), int(d)))
            break
        else:
            raise WorldError(f"no valid SD pair found after {max_tries} draws")
    return out


def effective_costs(net: RoadNetwork, pref: PreferenceField, tau: float, rng) -> np.ndarray:
    base = net.lengths / pref.weights
    if tau == 0:
        return base
    return base * np.exp(tau * _rng(rng).standard_normal(net.segment_count))


def sample_route(net: RoadNetwork, pref: PreferenceField, sd, tau: float, seed=0) -> Trajectory:
    """Shortest path under log-normally perturbed preference costs."""
    costs = effective_costs(net, pref, tau, _rng(seed))
    res = shortest_path(net, sd[0], sd[1], costs=costs)
    if res is None:
        raise WorldError(f"destination {sd[1]} unreachable from {sd[0]}")
    return Trajectory(res.path, "normal")


@dataclass
class World:
    corpus: Dataset
    preferences: PreferenceField
    head_pairs: list = field(default_factory=list)
    tail_pairs: list = field(default_factory=list)


def _distinct_pairs(net, pref, config, count, exponent, rng, reach, taken) -> list[SdPair]:
    pairs = []
    attempts = 0
    while len(pairs) < count:
        attempts += 1
        if attempts > 100 * count + 1000:
            raise WorldError(f"could not find {count} distinct SD pairs")
        (pair,) = sample_sd_pairs(net, pref, config, 1, rng, exponent, _reach=reach)
        if pair not in taken:
            taken.add(pair)
            pairs.append(pair)
    return pairs


def generate_world(net: RoadNetwork, config: WorldConfig) -> World:
    """Trip corpus: head pairs (confounded popularity) followed by tail pairs."""
    pref = sample_preferences(net, config.seed, config.preference_smoothing)
    rng = np.random.default_rng([config.seed, 1])
    reach = _Reach(net)
    taken: set = set()
    head = _distinct_pairs(net, pref, config, config.pairs_total, config.popularity_exponent, rng, reach, taken)
    tail = _distinct_pairs(net, pref, config, config.tail_pairs, config.tail_popularity_exponent, rng, reach, taken)
    trajs = []
    route_rng = np.random.default_rng([config.seed, 2])
    for pairs, per in ((head, config.trajectories_per_pair), (tail, config.tail_trajectories_per_pair)):
        for pair in pairs:
            for _ in range(per):
                trajs.append(sample_route(net, pref, pair, config.route_temperature, route_rng))
    return World(Dataset(trajs), pref, head, tail)


# ---------------------------------------------------------------------- anomalies
def _detour_triples(n: int, rng):
    triples = [(i, k, j) for i, j in combinations(range(n), 2) if j - i >= 2 for k in range(i + 1, j)]
    if rng is not None:
        order = rng.permutation(len(triples))
        triples = [triples[o] for o in order]
    return triples


def make_detour(traj: Trajectory, net: RoadNetwork, detour_band=(0.2, 2.0), rng=None,
                max_tries: int | None = None) -> Trajectory | None:
    """Reroute around one deleted segment.

    For index triples ``i < k < j`` (lexicographic, or shuffled by ``rng``)
    the segment ``t_k`` is removed and ``t_i .. t_j`` replaced by the
    shortest path that avoids it. The first splice whose cost increase,
    relative to the replaced sub-path, falls inside ``detour_band`` wins.
    """
    path = traj.path
    n = len(path)
    if n < 3:
        return None
    lo, hi = detour_band
    rng = None if rng is None else _rng(rng)
    for tries, (i, k, j) in enumerate(_detour_triples(n, rng)):
        if max_tries is not None and tries >= max_tries:
            break
        if path[k] in (path[i], path[j]):
            continue
        old = path_cost(net, path[i:j + 1])
        res = shortest_path(net, path[i], path[j], excluded={path[k]})
        if res is None:
            continue
        increase = (res.total_cost - old) / old
        if lo <= increase <= hi:
            new = path[:i] + res.path + path[j + 1:]
            return Trajectory(new, "detour", traj.sd)
    return None


def _switch_candidates(t: tuple, u: tuple) -> list[tuple]:
    """Paths that follow ``t`` to a shared interior segment and ``u`` afterwards.

    Ordered from the last divergence point along ``t`` backwards.
    """
    first_pos = {}
    for j, seg in enumerate(u[1:-1], start=1):
        first_pos.setdefault(seg, j)
    out = []
    for i in range(len(t) - 2, 0, -1):
        j = first_pos.get(t[i])
        if j is None or t[i + 1] == u[j + 1]:
            continue
        out.append(t[:i + 1] + u[j + 1:])
    return out


def make_switch(traj: Trajectory, pool, sim_threshold: float = 0.5, rng=None) -> Trajectory | None:
    """Switch from ``traj`` onto a dissimilar route with the same SD pair.

    Candidates ``t'`` come from ``pool`` with the same SD pair, a different
    path and Jaccard similarity at most ``sim_threshold``. The first result
    that differs from both routes is returned; if no candidate crosses
    ``traj`` at an interior segment, the switch happens at the source.
    """
    t = traj.path
    cands = [u for u in pool if u.sd == traj.sd and u.path != t and jaccard(u, traj) <= sim_threshold]
    if not cands:
        return None
    order = range(len(cands)) if rng is None else _rng(rng).permutation(len(cands))
    for idx in order:
        u = cands[idx].path
        for new in _switch_candidates(t, u):
            if new != t and new != u:
                return Trajectory(new, "switch", traj.sd)
    u = cands[next(iter(order))].path
    return Trajectory(t[:1] + u[1:], "switch", traj.sd)


def inject(source: Dataset, net: RoadNetwork, strategy: str, pool: Dataset | None = None,
           config: WorldConfig | None = None, seed=0, max_tries: int = 200) -> Dataset:
    """At most one anomaly per source trajectory; failures are skipped.

    Switch partners are looked up in ``pool`` (default: ``source`` itself).
    """
    config = config or WorldConfig()
    rng = np.random.default_rng(seed)
    if strategy == "switch":
        members = pool if pool is not None else source
        groups = members.by_sd()
    elif strategy != "detour":
        raise ValueError(f"unknown anomaly strategy {strategy!r}")
    out = []
    for t in source:
        if strategy == "detour":
            a = make_detour(t, net, config.detour_band, rng, max_tries=max_tries)
        else:
            a = make_switch(t, [members[i] for i in groups.get(t.sd, [])], config.switch_threshold, rng)
        if a is not None:
            out.append(a)
    return Dataset(out)
