import csv
import io

import numpy as np
import pytest

from causaltad.detector import TrainConfig
from causaltad.experiments import (CONDITIONS, SuiteConfig, _nested_take, aggregate, prepare_seed,
                                   push_timing, run_suite)
from causaltad.world import WorldConfig


def tiny_config(**kw):
    base = dict(rows=6, cols=6, world=WorldConfig(pairs_total=8, trajectories_per_pair=30, min_length=5),
                train=TrainConfig(dim=4, epochs=2, scaling_samples=16), n_candidate_pairs=6, min_count=20,
                seeds=(0, 1))
    base.update(kw)
    return SuiteConfig(**base)


@pytest.fixture(scope="module")
def tiny_run():
    bundles = {}
    report = run_suite(tiny_config(), bundles_out=bundles)
    return report, bundles


def _cells(report, section, condition, model, x):
    return {(r["seed"], r["metric"]): r["value"] for r in report.rows
            if (r["section"], r["condition"], r["model"], r["x"]) == (section, condition, model, x)}


def test_alpha_endpoints_equal_pure_conditions(tiny_run):
    report, _ = tiny_run
    checked = 0
    for kind in ("detour", "switch"):
        assert _cells(report, "alpha", kind, "full", 0.0) == _cells(report, "table", f"id_{kind}", "full", None)
        ood = _cells(report, "table", f"ood_{kind}", "full", None)
        if ood:  # the tiny world can leave an OOD anomaly set empty
            assert _cells(report, "alpha", kind, "full", 1.0) == ood
            checked += 1
    assert checked >= 1


def test_full_ratio_and_lambda_rows_equal_table(tiny_run):
    report, _ = tiny_run
    for cond in CONDITIONS:
        table = _cells(report, "table", cond, "full", None)
        assert _cells(report, "ratio", cond, "full", 1.0) == table
        assert _cells(report, "lambda", cond, "full", 0.1) == table
        assert _cells(report, "lambda", cond, "full", 0.0) == _cells(report, "table", cond, "tg_only", None)


def test_report_is_byte_reproducible(tiny_run):
    report, _ = tiny_run
    again = run_suite(tiny_config())
    assert again.to_json() == report.to_json()
    assert again.to_csv() == report.to_csv()


def test_supplied_bundles_reproduce_report(tiny_run):
    report, bundles = tiny_run
    assert run_suite(tiny_config(), bundles=bundles).to_json() == report.to_json()


def test_report_structure(tiny_run):
    report, _ = tiny_run
    doc = report.to_dict()
    assert doc["config"]["seeds"] == [0, 1] and len(doc["digest"]) == 16
    assert set(doc["sizes"]) == {"0", "1"}
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert len(rows) == len(report.rows)
    cell = report.summary["table"]["id_detour"]["full"]["-"]["roc_auc"]
    assert cell["n"] == 2
    assert report.mean("table", "id_detour") == cell["mean"]
    assert 0.0 <= cell["mean"] <= 1.0


def test_config_round_trip():
    cfg = tiny_config()
    assert SuiteConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        SuiteConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_eval_sets_have_equal_normals_and_labelled_anomalies():
    net, sp, sets = prepare_seed(tiny_config(), 0)
    assert len(sets.id_normals) == len(sets.ood_normals) == min(len(sp.id_test), len(sp.ood_test))
    id_pairs = {t.sd for t in sets.id_normals}
    assert not id_pairs & {t.sd for t in sets.ood_normals}
    for (origin, kind), d in sets.anomalies.items():
        assert all(t.label == kind for t in d)
        assert len(d) <= len(sets.id_normals)


def test_nested_take():
    order = np.random.default_rng(0).permutation(10)
    picks = [set(_nested_take(10, a, order)) for a in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)]
    assert [len(p) for p in picks] == [0, 2, 4, 6, 8, 10]
    assert all(a <= b for a, b in zip(picks, picks[1:]))


def test_aggregate_mean_and_std():
    rows = [{"section": "table", "condition": "id_detour", "model": "full", "x": None, "seed": s,
             "metric": "roc_auc", "value": v} for s, v in ((0, 0.6), (1, 0.8))]
    cell = aggregate(rows)["table"]["id_detour"]["full"]["-"]["roc_auc"]
    assert cell == {"mean": pytest.approx(0.7), "std": pytest.approx(0.1), "n": 2}


def test_push_timing_shape(tiny_run):
    _, bundles = tiny_run
    net, _, _ = prepare_seed(tiny_config(), 0)
    out = push_timing(bundles[0], net, lengths=(5, 20, 40), pushes_per_length=40)
    assert set(out["per_length"]) == {"5", "20", "40"}
    assert out["per_length"]["5"]["sessions"] == 8
    assert out["slope_s_per_push"] > 0
