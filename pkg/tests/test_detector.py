import json
import logging

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from causaltad.detector import (BundleError, CausalTAD, ModelBundle, ScoreTerms, TrainConfig,
                                score_dataset, score_full, score_terms, train)
from causaltad.experiments import random_walk
from causaltad.road_graph import grid_network
from causaltad.rp_vae import ScalingTable
from causaltad.tg_vae import ScoringError, neg_elbo
from causaltad.trajectory import Trajectory


def with_table(bundle, factors):
    return ModelBundle(bundle.store, bundle.n_segments, bundle.hyper,
                       ScalingTable(np.asarray(factors, dtype=np.float64), 1, 0), bundle.network_ref)


def random_trajectories(net, n, rng, max_len=30):
    return [Trajectory(tuple(random_walk(net, int(rng.integers(1, max_len + 1)), rng))) for _ in range(n)]


# ---------------------------------------------------------------------- training
def test_overfit_single_trajectory(grid3):
    bundle = train(TrainConfig(dim=8, epochs=50, batch_size=1), [Trajectory((0, 1, 2, 5, 8))], grid3,
                   build_table=False)
    assert len(bundle.history) == 50
    assert bundle.history[-1] < bundle.history[0]


def test_training_is_bit_deterministic(grid3):
    data = [Trajectory(p) for p in ((0, 1, 2, 5, 8), (0, 3, 6, 7, 8), (6, 3, 4, 5))]
    cfg = TrainConfig(dim=4, epochs=5, batch_size=2, seed=3, scaling_samples=8)
    a = json.dumps(train(cfg, data, grid3).to_dict())
    b = json.dumps(train(cfg, data, grid3).to_dict())
    assert a == b


def test_invalid_training_trajectories_are_skipped(grid3, caplog):
    data = [Trajectory((0, 1, 2)), Trajectory((0, 8))]
    with caplog.at_level(logging.WARNING, logger="causaltad.detector"):
        train(TrainConfig(dim=4, epochs=1), data, grid3, build_table=False)
    assert "skipped 1" in caplog.text
    with pytest.raises(ValueError):
        train(TrainConfig(dim=4, epochs=1), [Trajectory((0, 8))], grid3, build_table=False)


def test_bundle_round_trip(toy_world, tmp_path):
    bundle, net, routes = toy_world
    bundle.save(tmp_path / "b.json")
    back = ModelBundle.load(tmp_path / "b.json")
    trajs = [Trajectory(p) for p in routes[:5]]
    assert np.array_equal(score_dataset(back, trajs, 0.1, net), score_dataset(bundle, trajs, 0.1, net))
    assert back.to_dict() == bundle.to_dict()
    with pytest.raises(BundleError):
        score_full(back, trajs[0], 0.1, grid_network(3, 3))


# ---------------------------------------------------------------------- scoring
def test_lambda_zero_is_neg_elbo(toy_world):
    bundle, net, routes = toy_world
    for p in routes[:5]:
        t = Trajectory(p)
        assert score_full(bundle, t, 0.0, net) == pytest.approx(neg_elbo(bundle.tg, t, net), abs=1e-12)


def test_zero_table_is_neg_elbo(toy_world):
    bundle, net, routes = toy_world
    zeroed = with_table(bundle, np.zeros(net.segment_count))
    t = Trajectory(routes[7])
    assert score_full(zeroed, t, 0.1, net) == pytest.approx(neg_elbo(bundle.tg, t, net), abs=1e-12)


def test_hand_built_example():
    terms = ScoreTerms(fixed=np.array([0.5]), step_nll=np.array([[0.5, 0.6, 0.4]]),
                       step_log_factor=np.array([[0.5, 0.2, 0.3]]), lengths=np.array([3]))
    assert terms.elbo()[0] == pytest.approx(2.0, abs=1e-15)
    assert terms.scores(0.1)[0] == pytest.approx(1.9, abs=1e-15)


def test_score_subtracts_lambda_weighted_factors(toy_world):
    bundle, net, _ = toy_world
    factors = np.linspace(0.1, 1.6, net.segment_count)
    b = with_table(bundle, factors)
    t = Trajectory((0, 1, 5, 9))
    expected = neg_elbo(bundle.tg, t, net) - 0.1 * factors[[0, 1, 5, 9]].sum()
    assert score_full(b, t, 0.1, net) == pytest.approx(expected, abs=1e-12)


def test_score_is_affine_in_lambda(toy_world):
    bundle, net, routes = toy_world
    terms = score_terms(bundle, [Trajectory(p) for p in routes], net)
    slope = -terms.scaling()
    for lam in (0.05, 0.5, 2.0):
        np.testing.assert_allclose(terms.scores(lam), terms.scores(0.0) + lam * slope, rtol=0, atol=1e-12)


def test_missing_table_rejected_for_positive_lambda(toy_world):
    bundle, net, _ = toy_world
    bare = ModelBundle(bundle.store, bundle.n_segments, bundle.hyper, None)
    t = Trajectory((0, 1))
    assert score_full(bare, t, 0.0, net) == score_full(bundle, t, 0.0, net)
    with pytest.raises(BundleError, match="scaling table"):
        score_full(bare, t, 0.1, net)
    with pytest.raises(BundleError):
        bare.open_session((0, 1), net, lam=0.1)


def test_negative_lambda_rejected(toy_world):
    bundle, net, _ = toy_world
    with pytest.raises(ValueError):
        score_full(bundle, Trajectory((0, 1)), -0.1, net)


def test_decomposition_identity(toy_world):
    bundle, net, _ = toy_world
    trajs = random_trajectories(net, 200, np.random.default_rng(0))
    terms = score_terms(bundle, trajs, net)
    per_segment = (terms.step_nll - 0.1 * terms.step_log_factor).sum(axis=1)
    assert np.max(np.abs(terms.scores(0.1) - terms.fixed - per_segment)) <= 1e-12


def test_session_matches_full_score(toy_world):
    bundle, net, _ = toy_world
    rng = np.random.default_rng(1)
    for t in random_trajectories(net, 100, rng):
        s = bundle.open_session(t.sd, net)
        for seg in t.path:
            s.push(seg)
        assert abs(s.score - score_full(bundle, t, bundle.lam, net)) < 1e-9


def test_session_prefixes_match_prefix_scores(toy_world):
    bundle, net, _ = toy_world
    path = (0, 1, 2, 6, 10, 11, 15)
    s = bundle.open_session((0, 15), net)
    for k, seg in enumerate(path, start=1):
        s.push(seg)
        prefix = Trajectory(path[:k], sd=(0, 15))
        assert abs(s.score - score_full(bundle, prefix, bundle.lam, net)) < 1e-9


def test_likelihood_accumulator_nondecreasing(toy_world):
    bundle, net, _ = toy_world
    s = bundle.open_session((0, 15), net)
    seen = [s.likelihood]
    for seg in (0, 4, 8, 9, 13, 14, 15, 11):  # runs past the destination
        s.push(seg)
        seen.append(s.likelihood)
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    assert s.steps == 8


def test_non_adjacent_push_names_segments(toy_world):
    bundle, net, _ = toy_world
    s = bundle.open_session((0, 15), net)
    s.push(0)
    with pytest.raises(ScoringError, match="segment 5 does not follow segment 0"):
        s.push(5)


def test_observed_ratio_prefix_lengths():
    terms = ScoreTerms(np.zeros(3), np.ones((3, 10)), np.zeros((3, 10)), np.array([10, 3, 1]))
    assert terms.prefix_lengths(0.2).tolist() == [2, 1, 1]
    assert terms.prefix_lengths(0.6).tolist() == [6, 2, 1]
    assert terms.prefix_lengths(1.0).tolist() == [10, 3, 1]
    np.testing.assert_array_equal(terms.elbo(0.6), [6.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        terms.prefix_lengths(0.0)


# ---------------------------------------------------------------------- estimator
def test_estimator_api(grid3):
    est = CausalTAD(grid3, dim=4, epochs=3, batch_size=2, scaling_samples=8)
    assert clone(est).get_params()["dim"] == 4
    with pytest.raises(NotFittedError):
        est.anomaly_score([[0, 1]])
    X = [[0, 1, 2, 5, 8], [0, 3, 6, 7, 8], [6, 3, 4, 5]]
    est.fit(X)
    assert len(est.loss_curve_) == 3
    scores = est.anomaly_score(X)
    assert scores.shape == (3,) and np.all(np.isfinite(scores))
    np.testing.assert_array_equal(est.score_samples(X), -scores)
    np.testing.assert_array_equal(est.anomaly_score(X, lam=0.0), est.score_terms(X).elbo())
    again = CausalTAD.from_bundle(est.bundle_, grid3)
    np.testing.assert_array_equal(again.anomaly_score(X), scores)
    with pytest.raises(ValueError):
        CausalTAD(None).fit(X)
