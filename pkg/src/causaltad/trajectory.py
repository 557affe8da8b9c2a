"""Map-matched trajectories, datasets, splitting and the line-oriented file format."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .road_graph import RoadNetwork

LABELS = ("normal", "detour", "switch")


class DatasetError(ValueError):
    """Malformed trajectory data or an impossible split request."""


class SdPair(NamedTuple):
    source: int
    destination: int


@dataclass(frozen=True)
class Trajectory:
    """Ordered road-segment sequence with its SD pair and label.

    The SD pair defaults to ``(path[0], path[-1])``.
    """

    path: tuple[int, ...]
    label: str = "normal"
    sd: SdPair | None = None

    def __post_init__(self):
        path = tuple(int(s) for s in self.path)
        if not path:
            raise DatasetError("trajectory path must not be empty")
        if self.label not in LABELS:
            raise DatasetError(f"unknown label {self.label!r}; expected one of {LABELS}")
        sd = SdPair(path[0], path[-1]) if self.sd is None else SdPair(int(self.sd[0]), int(self.sd[1]))
        object.__setattr__(self, "path", path)
        object.__setattr__(self, "sd", sd)

    def __len__(self):
        return len(self.path)

    @property
    def is_anomaly(self) -> bool:
        return self.label != "normal"

    def with_label(self, label: str) -> "Trajectory":
        return Trajectory(self.path, label, self.sd)

    def to_record(self) -> dict:
        return {"sd": [self.sd.source, self.sd.destination], "path": list(self.path), "label": self.label}

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        return cls(tuple(rec["path"]), rec.get("label", "normal"), tuple(rec["sd"]) if "sd" in rec else None)


@dataclass(frozen=True)
class Violation:
    kind: str  # "adjacency" | "sd_mismatch" | "too_short" | "repeat" | "invalid_segment"
    index: int
    message: str


def validate(traj: Trajectory, net: RoadNetwork, min_length: int = 2) -> list[Violation]:
    """Every rule ``traj`` breaks against ``net``; an empty list means valid."""
    out = []
    n = net.segment_count
    path = traj.path
    if len(path) < min_length:
        out.append(Violation("too_short", len(path), f"length {len(path)} below minimum {min_length}"))
    bad = [i for i, s in enumerate(path) if not 0 <= s < n]
    for i in bad:
        out.append(Violation("invalid_segment", i, f"segment {path[i]} not in network"))
    for side, seg in (("source", traj.sd.source), ("destination", traj.sd.destination)):
        if not 0 <= seg < n:
            out.append(Violation("invalid_segment", -1, f"SD {side} {seg} not in network"))
    if traj.sd.source != path[0] or traj.sd.destination != path[-1]:
        out.append(Violation("sd_mismatch", -1,
                             f"SD pair {tuple(traj.sd)} does not match path ends ({path[0]}, {path[-1]})"))
    if bad:
        return out
    mask = net.successor_mask
    for i in range(len(path) - 1):
        a, b = path[i], path[i + 1]
        if a == b:
            out.append(Violation("repeat", i, f"segment {a} repeated at index {i}"))
        elif not mask[a, b]:
            out.append(Violation("adjacency", i, f"{b} does not follow {a} (index {i})"))
    return out


def is_valid(traj: Trajectory, net: RoadNetwork, min_length: int = 2) -> bool:
    return not validate(traj, net, min_length)


def jaccard(t: Trajectory | Sequence[int], t2: Trajectory | Sequence[int]) -> float:
    a = set(t.path if isinstance(t, Trajectory) else t)
    b = set(t2.path if isinstance(t2, Trajectory) else t2)
    if not a or not b:
        raise DatasetError("jaccard similarity needs two non-empty paths")
    return len(a & b) / len(a | b)


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    network_ref: str = field(default="", compare=False)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def by_sd(self) -> dict[SdPair, list[int]]:
        """Indices of trajectories grouped by SD pair, in first-seen order."""
        groups: dict[SdPair, list[int]] = defaultdict(list)
        for i, t in enumerate(self.trajectories):
            groups[t.sd].append(i)
        return dict(groups)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.trajectories[i] for i in indices], self.network_ref)

    def labels(self) -> np.ndarray:
        return np.array([t.is_anomaly for t in self.trajectories], dtype=bool)


@dataclass
class Split:
    train: Dataset
    id_test: Dataset
    ood_test: Dataset
    candidate_pairs: list[SdPair]


def split_dataset(d: Dataset, n_candidate_pairs: int, seed: int, min_count: int = 100,
                  ood_size: int | None = None) -> Split:
    """Train / ID-test / OOD-test split.

    ``n_candidate_pairs`` SD pairs are drawn among those with at least
    ``min_count`` trajectories; each candidate pair's trajectories are
    shuffled and halved into train and ID test. The OOD test set samples
    ``ood_size`` trajectories (default: the ID test size) from SD pairs that
    are not candidates.
    """
    if n_candidate_pairs < 1:
        raise DatasetError("n_candidate_pairs must be positive")
    groups = d.by_sd()
    qualifying = sorted(p for p, idx in groups.items() if len(idx) >= min_count)
    if len(qualifying) < n_candidate_pairs:
        raise DatasetError(
            f"only {len(qualifying)} SD pairs have >= {min_count} trajectories; "
            f"{n_candidate_pairs} requested (short by {n_candidate_pairs - len(qualifying)})"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(qualifying), size=n_candidate_pairs, replace=False)
    candidates = sorted(qualifying[i] for i in chosen)
    train_idx, id_idx = [], []
    for pair in candidates:
        idx = np.array(groups[pair])
        idx = idx[rng.permutation(len(idx))]
        half = len(idx) // 2
        train_idx.extend(sorted(idx[:half].tolist()))
        id_idx.extend(sorted(idx[half:].tolist()))
    cand = set(candidates)
    pool = [i for i, t in enumerate(d.trajectories) if t.sd not in cand]
    size = len(id_idx) if ood_size is None else ood_size
    size = min(size, len(pool))
    ood_idx = sorted(rng.choice(pool, size=size, replace=False).tolist()) if size else []
    return Split(d.subset(train_idx), d.subset(id_idx), d.subset(ood_idx), candidates)


# ---------------------------------------------------------------------- file io
def dumps_record(t: Trajectory) -> str:
    return json.dumps(t.to_record(), separators=(",", ":"))


def write_dataset(d: Dataset, path) -> None:
    with open(path, "w") as fh:
        for t in d.trajectories:
            fh.write(dumps_record(t) + "\n")


def read_dataset(path, net: RoadNetwork | None = None, strict: bool = False,
                 min_length: int = 2) -> Dataset:
    """Load a line-delimited dataset; ``strict`` validates each record against ``net``."""
    if strict and net is None:
        raise DatasetError("strict loading needs a network")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                traj = Trajectory.from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, DatasetError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
            if strict:
                problems = validate(traj, net, min_length)
                if problems:
                    raise DatasetError(f"{path}:{lineno}: {problems[0].message}")
            out.append(traj)
    return Dataset(out, network_ref=str(path))


def summarize(d: Dataset) -> dict:
    lengths = [len(t) for t in d.trajectories]
    return {
        "trajectories": len(d),
        "sd_pairs": len(d.by_sd()),
        "mean_length": float(np.mean(lengths)) if lengths else math.nan,
    }
