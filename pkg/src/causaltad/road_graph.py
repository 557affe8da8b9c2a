"""Directed road-segment graph.

Nodes are road segments (not intersections): an edge ``a -> b`` means a
vehicle on segment ``a`` can continue onto segment ``b``. Path cost charges
the length of every segment that is *entered*, so the first segment of a
path is free and ``[s]`` costs 0.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class NetworkError(ValueError):
    """Invalid network construction or query."""


@dataclass(frozen=True)
class PathResult:
    path: tuple[int, ...]
    total_cost: float


@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Immutable directed transition graph over road segments."""

    lengths: np.ndarray
    adjacency: tuple[tuple[int, ...], ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.float64)
        if lengths.ndim != 1 or lengths.size == 0:
            raise NetworkError("lengths must be a non-empty 1-D array")
        if not np.all(np.isfinite(lengths)) or np.any(lengths <= 0):
            raise NetworkError("segment lengths must be finite and strictly positive")
        if len(self.adjacency) != lengths.size:
            raise NetworkError(
                f"adjacency has {len(self.adjacency)} rows for {lengths.size} segments"
            )
        adjacency = []
        n = lengths.size
        for seg, succ in enumerate(self.adjacency):
            succ = tuple(int(s) for s in succ)
            for s in succ:
                if not 0 <= s < n:
                    raise NetworkError(f"segment {seg} has dangling neighbor {s}")
                if s == seg:
                    raise NetworkError(f"segment {seg} has a self-loop")
            if len(set(succ)) != len(succ):
                raise NetworkError(f"segment {seg} lists a neighbor twice")
            adjacency.append(succ)
        lengths.setflags(write=False)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "adjacency", tuple(adjacency))

    @property
    def segment_count(self) -> int:
        return int(self.lengths.size)

    def __len__(self):
        return self.segment_count

    def __eq__(self, other):
        if not isinstance(other, RoadNetwork):
            return NotImplemented
        return self.adjacency == other.adjacency and np.array_equal(self.lengths, other.lengths)

    def __hash__(self):
        return hash((self.adjacency, self.lengths.tobytes()))

    def check_segment(self, seg) -> int:
        try:
            seg_int = int(seg)
        except (TypeError, ValueError):
            raise NetworkError(f"segment id {seg!r} is not an integer") from None
        if seg_int != seg or not 0 <= seg_int < self.segment_count:
            raise NetworkError(
                f"invalid segment id {seg!r} (network has {self.segment_count} segments)"
            )
        return seg_int

    def neighbors(self, seg) -> tuple[int, ...]:
        """Successors of ``seg`` in stored (deterministic) order."""
        return self.adjacency[self.check_segment(seg)]

    def is_adjacent(self, a: int, b: int) -> bool:
        return bool(self.successor_mask[a, b])

    @cached_property
    def successor_mask(self) -> np.ndarray:
        """Dense boolean matrix ``M[a, b]`` true iff ``b`` follows ``a``."""
        n = self.segment_count
        mask = np.zeros((n, n), dtype=bool)
        for seg, succ in enumerate(self.adjacency):
            mask[seg, list(succ)] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def out_degree(self) -> np.ndarray:
        return np.array([len(s) for s in self.adjacency], dtype=np.int64)

    # ------------------------------------------------------------------ io
    @classmethod
    def from_edges(cls, lengths, edges: Iterable[tuple[int, int]], directed: bool = True,
                   name: str = "") -> "RoadNetwork":
        """Build from an edge list; undirected edges are expanded both ways."""
        n = len(lengths)
        succ: list[list[int]] = [[] for _ in range(n)]
        for a, b in edges:
            pairs = [(a, b)] if directed else [(a, b), (b, a)]
            for u, v in pairs:
                if not (0 <= u < n and 0 <= v < n):
                    raise NetworkError(f"edge ({u}, {v}) references a missing segment")
                if v not in succ[u]:
                    succ[u].append(v)
        return cls(np.asarray(lengths, dtype=np.float64), tuple(tuple(sorted(s)) for s in succ), name=name)

    def to_dict(self) -> dict:
        return {
            "segments": [
                {"id": i, "length": float(self.lengths[i]), "neighbors": list(self.adjacency[i])}
                for i in range(self.segment_count)
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict, name: str = "") -> "RoadNetwork":
        if not isinstance(doc, dict) or "segments" not in doc:
            raise NetworkError('network document must be an object with a "segments" list')
        segments = doc["segments"]
        n = len(segments)
        lengths = np.empty(n)
        adjacency: list = [None] * n
        for rec in segments:
            try:
                sid, length, nbrs = rec["id"], rec["length"], rec["neighbors"]
            except (KeyError, TypeError):
                raise NetworkError(f"malformed segment record {rec!r}") from None
            if not isinstance(sid, int) or not 0 <= sid < n:
                raise NetworkError(f"segment id {sid!r} outside dense range 0..{n - 1}")
            if adjacency[sid] is not None:
                raise NetworkError(f"duplicate segment id {sid}")
            lengths[sid] = float(length)
            adjacency[sid] = tuple(int(x) for x in nbrs)
        return cls(lengths, tuple(adjacency), name=name)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "RoadNetwork":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise NetworkError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc, name=str(path))


def neighbors(net: RoadNetwork, seg: int) -> tuple[int, ...]:
    return net.neighbors(seg)


def path_cost(net: RoadNetwork, path: Sequence[int], costs: np.ndarray | None = None) -> float:
    """Entering cost of ``path``: sum of lengths of all segments after the first."""
    weights = net.lengths if costs is None else costs
    return float(sum(weights[s] for s in path[1:]))


def shortest_path(net: RoadNetwork, source: int, target: int,
                  excluded: Iterable[int] = (), costs: np.ndarray | None = None) -> PathResult | None:
    """Dijkstra from ``source`` to ``target`` avoiding ``excluded`` segments.

    ``costs`` overrides the per-segment entering cost (defaults to lengths).
    Ties are resolved toward smaller segment ids. Returns ``None`` if
    ``target`` is unreachable.
    """
    source = net.check_segment(source)
    target = net.check_segment(target)
    banned = {net.check_segment(s) for s in excluded}
    if source in banned or target in banned:
        raise NetworkError("excluded set contains the source or target segment")
    weights = net.lengths if costs is None else np.asarray(costs, dtype=np.float64)

    dist = {source: 0.0}
    prev: dict[int, int] = {}
    done = set()
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == target:
            break
        for v in net.adjacency[u]:
            if v in banned or v in done:
                continue
            nd = d + weights[v]
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if target not in done:
        return None
    path = [target]
    while path[-1] != source:
        path.append(prev[path[-1]])
    path.reverse()
    return PathResult(tuple(path), float(dist[target]))


def hop_distances(net: RoadNetwork, source: int) -> np.ndarray:
    """Breadth-first hop counts from ``source``; -1 marks unreachable."""
    dist = np.full(net.segment_count, -1, dtype=np.int64)
    dist[source] = 0
    frontier = [source]
    while frontier:
        nxt = []
        for u in frontier:
            for v in net.adjacency[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def grid_network(rows: int, cols: int, length_model: str = "constant", *, length: float = 1.0,
                 low: float = 0.5, high: float = 1.5, seed: int = 0) -> RoadNetwork:
    """Grid of ``rows x cols`` segments with bidirectional 4-neighbour moves.

    Segment ``r * cols + c`` is the cell at row ``r``, column ``c``.
    ``length_model`` is ``"constant"`` (every segment has ``length``) or
    ``"uniform"`` (seeded draws from ``[low, high)``).
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise NetworkError(f"grid needs positive dimensions with at least 2 cells, got {rows}x{cols}")
    n = rows * cols
    if length_model == "constant":
        if not length > 0:
            raise NetworkError("constant length must be positive")
        lengths = np.full(n, float(length))
    elif length_model == "uniform":
        if not 0 < low < high:
            raise NetworkError("uniform length model needs 0 < low < high")
        lengths = np.random.default_rng(seed).uniform(low, high, size=n)
    else:
        raise NetworkError(f"unknown length model {length_model!r}")
    adjacency = []
    for r in range(rows):
        for c in range(cols):
            succ = []
            for dr, dc in ((-1, 0), (0, -1), (0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    succ.append(rr * cols + cc)
            adjacency.append(tuple(sorted(succ)))
    return RoadNetwork(lengths, tuple(adjacency), name=f"grid-{rows}x{cols}")
