"""Input validation helpers shared by the estimator, the scorer and the CLI."""

from __future__ import annotations

import numbers

from .road_graph import RoadNetwork
from .trajectory import Dataset, DatasetError, Trajectory, validate


def as_trajectory(x) -> Trajectory:
    if isinstance(x, Trajectory):
        return x
    try:
        return Trajectory(tuple(int(s) for s in x))
    except TypeError:
        raise DatasetError(f"cannot interpret {type(x).__name__} as a trajectory") from None


def check_trajectories(X, net: RoadNetwork | None = None, strict: bool = True,
                       min_length: int = 1) -> list[Trajectory]:
    """Coerce ``X`` to a list of trajectories.

    With ``strict`` and a network, the first invalid trajectory raises
    :class:`DatasetError` naming its position and problem.
    """
    if isinstance(X, Dataset):
        X = X.trajectories
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise DatasetError("expected an iterable of trajectories")
    trajs = [as_trajectory(x) for x in X]
    if strict and net is not None:
        for i, t in enumerate(trajs):
            problems = validate(t, net, min_length)
            if problems:
                raise DatasetError(f"trajectory {i}: {problems[0].message}")
    return trajs


def check_lambda(lam) -> float:
    if not isinstance(lam, numbers.Real) or not lam >= 0 or lam != lam:
        raise ValueError(f"lambda must be a non-negative real, got {lam!r}")
    return float(lam)


def check_observed_ratio(rho) -> float:
    if not isinstance(rho, numbers.Real) or not 0 < rho <= 1:
        raise ValueError(f"observed ratio must lie in (0, 1], got {rho!r}")
    return float(rho)
