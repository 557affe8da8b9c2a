import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causaltad.road_graph import (NetworkError, RoadNetwork, grid_network, hop_distances,
                                  neighbors, path_cost, shortest_path)

from conftest import line_network, random_network, simple_paths


def test_grid_center_has_four_neighbors(grid3):
    assert set(neighbors(grid3, 4)) == {1, 3, 5, 7}


def test_empty_adjacency_and_dead_end():
    net = RoadNetwork.from_edges([1.0, 1.0, 1.0], [(0, 1)])
    assert neighbors(net, 2) == ()
    assert neighbors(net, 1) == ()


def test_neighbors_rejects_bad_ids(grid3):
    for bad in (-1, 9, 2.5, "x"):
        with pytest.raises(NetworkError):
            neighbors(grid3, bad)


def test_neighbors_match_mask(grid3):
    for a in range(9):
        for b in range(9):
            assert grid3.successor_mask[a, b] == (b in grid3.neighbors(a))


def test_grid_degrees(grid3):
    deg = [len(grid3.neighbors(s)) for s in range(9)]
    assert deg == [2, 3, 2, 3, 4, 3, 2, 3, 2]
    g12 = grid_network(1, 2)
    assert g12.neighbors(0) == (1,) and g12.neighbors(1) == (0,)


@pytest.mark.parametrize("rows,cols", [(0, 3), (3, 0), (1, 1)])
def test_grid_rejects_degenerate(rows, cols):
    with pytest.raises(NetworkError):
        grid_network(rows, cols)


def test_grid_uniform_lengths_seeded():
    a = grid_network(3, 4, "uniform", seed=5)
    b = grid_network(3, 4, "uniform", seed=5)
    assert a == b
    assert np.all((a.lengths >= 0.5) & (a.lengths < 1.5))


def test_line_shortest_path(line3):
    res = shortest_path(line3, 0, 2)
    assert res.path == (0, 1, 2)
    assert res.total_cost == 2.0
    assert shortest_path(line3, 0, 2, excluded={1}) is None


def test_excluding_endpoint_is_an_error(line3):
    with pytest.raises(NetworkError):
        shortest_path(line3, 0, 2, excluded={2})


def test_trivial_path_costs_zero(grid3):
    res = shortest_path(grid3, 4, 4)
    assert res.path == (4,) and res.total_cost == 0.0


def test_grid2x2_diagonal_cost_two():
    net = grid_network(2, 2)
    paths = simple_paths(net, 0, 3)
    assert sorted(paths) == [(0, 1, 3), (0, 2, 3)]
    assert all(path_cost(net, p) == 2.0 for p in paths)
    assert shortest_path(net, 0, 3).total_cost == 2.0


def test_grid3_detour_around_interior_segment(grid3):
    base = shortest_path(grid3, 0, 8)
    res = shortest_path(grid3, 0, 8, excluded={4})
    alternatives = simple_paths(grid3, 0, 8, banned={4})
    best = min(path_cost(grid3, p) for p in alternatives)
    assert res.total_cost == best == base.total_cost == 4.0
    assert 4 not in res.path
    assert res.path in alternatives


def test_ties_break_toward_smaller_ids(grid3):
    assert shortest_path(grid3, 0, 8).path == (0, 1, 2, 5, 8)


def test_path_result_is_adjacent_and_cost_consistent(grid3):
    res = shortest_path(grid3, 2, 6)
    for a, b in zip(res.path, res.path[1:]):
        assert grid3.is_adjacent(a, b)
    assert res.total_cost == path_cost(grid3, res.path)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12))
def test_dijkstra_matches_exhaustive_enumeration(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    s, d = (int(x) for x in rng.choice(n, size=2, replace=False))
    banned = {int(x) for x in range(n) if x not in (s, d) and rng.random() < 0.2}
    paths = simple_paths(net, s, d, frozenset(banned))
    res = shortest_path(net, s, d, excluded=banned)
    if not paths:
        assert res is None
        return
    best = min(path_cost(net, p) for p in paths)
    assert res is not None
    assert res.total_cost == pytest.approx(best, rel=1e-12)
    assert res.path in paths


def test_hop_distances(line3):
    assert hop_distances(line3, 0).tolist() == [0, 1, 2]
    assert hop_distances(line3, 2).tolist() == [-1, -1, 0]


def test_network_file_round_trip(tmp_path, grid3):
    path = tmp_path / "net.json"
    grid3.save(path)
    assert RoadNetwork.load(path) == grid3


@pytest.mark.parametrize("doc", [
    {"segments": [{"id": 0, "length": 1.0, "neighbors": [1]}, {"id": 0, "length": 1.0, "neighbors": []}]},
    {"segments": [{"id": 0, "length": 1.0, "neighbors": [5]}]},
    {"segments": [{"id": 0, "length": -1.0, "neighbors": []}]},
    {"segments": [{"id": 0, "length": 1.0, "neighbors": [0]}]},
    {"segments": [{"id": 3, "length": 1.0, "neighbors": []}]},
    {"nodes": []},
])
def test_loader_rejects_bad_documents(tmp_path, doc):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(NetworkError):
        RoadNetwork.load(path)


def test_undirected_edges_expand_both_ways():
    net = RoadNetwork.from_edges([1.0, 1.0], [(0, 1)], directed=False)
    assert net.neighbors(0) == (1,) and net.neighbors(1) == (0,)
    assert line_network(2).neighbors(1) == ()
