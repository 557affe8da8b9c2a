import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causaltad.trajectory import (Dataset, DatasetError, SdPair, Trajectory, jaccard, read_dataset,
                                  split_dataset, validate, write_dataset)

from conftest import line_network


def test_valid_line_path(line3):
    assert validate(Trajectory((0, 1, 2)), line3) == []


def test_adjacency_violation_reported_at_index(line3):
    problems = validate(Trajectory((0, 2)), line3)
    assert [(p.kind, p.index) for p in problems] == [("adjacency", 0)]


def test_sd_mismatch(line3):
    problems = validate(Trajectory((0, 1, 2), sd=(0, 1)), line3)
    assert [p.kind for p in problems] == ["sd_mismatch"]


def test_minimum_length(line3):
    assert [p.kind for p in validate(Trajectory((0, 1)), line3, min_length=30)] == ["too_short"]
    assert validate(Trajectory((0, 1)), line3) == []


def test_repetition_and_bad_ids(line3):
    assert "repeat" in {p.kind for p in validate(Trajectory((0, 0, 1)), line3)}
    assert "invalid_segment" in {p.kind for p in validate(Trajectory((0, 7)), line3)}


def test_sd_defaults_to_path_ends():
    assert Trajectory((4, 5, 6)).sd == SdPair(4, 6)


def test_jaccard_examples():
    assert jaccard((1, 2, 3), (1, 2, 3)) == 1.0
    assert jaccard((1, 2), (3, 4)) == 0.0
    assert jaccard((0, 1, 2), (1, 2, 3)) == 0.5
    with pytest.raises(DatasetError):
        jaccard((), (1,))


paths = st.lists(st.integers(0, 8), min_size=1, max_size=10)


@given(a=paths, b=paths)
def test_jaccard_symmetric_and_one_iff_equal_sets(a, b):
    assert jaccard(a, b) == jaccard(b, a)
    assert (jaccard(a, b) == 1.0) == (set(a) == set(b))
    assert 0.0 <= jaccard(a, b) <= 1.0


def _pair_dataset(counts: dict) -> Dataset:
    trajs = []
    for (s, d), n in counts.items():
        for k in range(n):
            trajs.append(Trajectory((s, 100 + k, d)))
    return Dataset(trajs)


def test_split_single_pair():
    d = _pair_dataset({(0, 1): 10})
    sp = split_dataset(d, 1, seed=0, min_count=10)
    assert len(sp.train) == 5 and len(sp.id_test) == 5 and len(sp.ood_test) == 0


def test_split_shortfall_is_an_error():
    d = _pair_dataset({(0, 1): 3, (2, 3): 4})
    with pytest.raises(DatasetError, match="short by 1"):
        split_dataset(d, 1, seed=0, min_count=10)


def test_split_recount_on_synthetic_world():
    counts = {(i, 1000 + i): 100 for i in range(60)}
    d = _pair_dataset(counts)
    sp = split_dataset(d, 50, seed=3, min_count=100)
    assert len(sp.train) == 2500 and len(sp.id_test) == 2500
    cand = set(sp.candidate_pairs)
    assert len(cand) == 50
    held_out = set(counts) - cand
    assert {t.sd for t in sp.ood_test} <= held_out
    assert len(sp.ood_test) == 1000  # every trajectory of the 10 held-out pairs
    for pair in cand:
        tr = [t for t in sp.train if t.sd == pair]
        te = [t for t in sp.id_test if t.sd == pair]
        assert len(tr) == len(te) == 50
        assert {t.path for t in tr}.isdisjoint({t.path for t in te})


def test_split_is_deterministic(tmp_path):
    d = _pair_dataset({(i, 50 + i): 20 + i for i in range(8)})
    outs = []
    for run in range(2):
        sp = split_dataset(d, 3, seed=11, min_count=20, ood_size=10)
        for name in ("train", "id_test", "ood_test"):
            write_dataset(getattr(sp, name), tmp_path / f"{name}{run}.jsonl")
        outs.append([(tmp_path / f"{n}{run}.jsonl").read_bytes() for n in ("train", "id_test", "ood_test")])
    assert outs[0] == outs[1]


def test_dataset_round_trip(tmp_path):
    d = Dataset([Trajectory((0, 1, 2)), Trajectory((2, 1), "detour"), Trajectory((1, 0, 1), "switch", sd=(1, 1))])
    path = tmp_path / "d.jsonl"
    write_dataset(d, path)
    assert read_dataset(path) == d
    assert path.read_text().splitlines()[0] == '{"sd":[0,2],"path":[0,1,2],"label":"normal"}'


def test_empty_file_gives_empty_dataset(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(read_dataset(path)) == 0


def test_strict_load_reports_line_number(tmp_path):
    net = line_network(3)
    path = tmp_path / "bad.jsonl"
    path.write_text('{"sd":[0,2],"path":[0,1,2],"label":"normal"}\n{"sd":[0,2],"path":[0,2],"label":"normal"}\n')
    assert len(read_dataset(path)) == 2
    with pytest.raises(DatasetError, match=r"bad.jsonl:2"):
        read_dataset(path, net, strict=True)


def test_malformed_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"sd":[0,2],"path":[0,1,2]}\nnot json\n')
    with pytest.raises(DatasetError, match=":2:"):
        read_dataset(path)


def test_labels_vector():
    d = Dataset([Trajectory((0, 1)), Trajectory((0, 1), "switch")])
    assert d.labels().tolist() == [False, True]
    np.testing.assert_array_equal(d.labels(), np.array([False, True]))
