"""Experiment suite: condition tables, sweeps, ablations and push timing.

Every cell is computed per seed from one trained bundle and then averaged.
Scores are computed once per dataset as :class:`ScoreTerms`; lambdas,
observed ratios and mixtures are all cheap re-combinations of those terms,
so the ``alpha in {0, 1}`` and ``rho = 1`` identities hold exactly.

Wall-clock timing lives in :func:`push_timing` and is never written into the
suite report, which must stay byte-reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .detector import ModelBundle, ScoreTerms, TrainConfig, config_digest, score_terms, train
from .metrics import pr_auc, roc_auc
from .road_graph import RoadNetwork, grid_network
from .trajectory import Dataset, split_dataset
from .world import WorldConfig, generate_world, inject

logger = logging.getLogger(__name__)

CONDITIONS = ("id_detour", "id_switch", "ood_detour", "ood_switch")
ANOMALY_KINDS = ("detour", "switch")
MODELS = ("full", "tg_only", "rp_only")
METRICS = {"roc_auc": roc_auc, "pr_auc": pr_auc}


def _default_world() -> WorldConfig:
    return WorldConfig(pairs_total=60, trajectories_per_pair=200, min_length=8)


def _default_train() -> TrainConfig:
    return TrainConfig(dim=32, epochs=30)


@dataclass
class SuiteConfig:
    """Recipe for a seed-replicated desk-scale run.

    Per seed ``k`` the world, split, training and anomaly draws all use
    seed ``k``; anomaly injection streams are ``[k, 3..6]``.
    """

    rows: int = 20
    cols: int = 20
    world: WorldConfig = field(default_factory=_default_world)
    train: TrainConfig = field(default_factory=_default_train)
    n_candidate_pairs: int = 50
    min_count: int = 100
    seeds: tuple = (0, 1, 2, 3, 4)
    lam: float = 0.1
    lambdas: tuple = (0.0, 0.05, 0.1, 0.2, 0.5, 1.0)
    alphas: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    ratios: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["world"] = self.world.to_dict()
        d["train"] = asdict(self.train)
        for k in ("seeds", "lambdas", "alphas", "ratios"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SuiteConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise KeyError(f"unknown suite keys: {sorted(unknown)}")
        doc = dict(doc)
        if "world" in doc:
            doc["world"] = WorldConfig(**doc["world"])
        if "train" in doc:
            doc["train"] = TrainConfig(**doc["train"])
        for k in ("seeds", "lambdas", "alphas", "ratios"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)


@dataclass
class EvalSets:
    """Normal test sets and the anomalies derived from each of them."""

    id_normals: Dataset
    ood_normals: Dataset
    anomalies: dict  # (origin, kind) -> Dataset, origin in {"id", "ood"}

    def sizes(self) -> dict:
        out = {"id_normals": len(self.id_normals), "ood_normals": len(self.ood_normals)}
        for (origin, kind), d in sorted(self.anomalies.items()):
            out[f"{origin}_{kind}"] = len(d)
        return out


def build_eval_sets(net: RoadNetwork, corpus: Dataset, id_test: Dataset, ood_test: Dataset,
                    world: WorldConfig, seed: int) -> EvalSets:
    """Equal-size ID/OOD normal sets plus one anomaly attempt per normal.

    The larger of the two normal sets is subsampled (seeded) to the size of
    the smaller so that mixtures are literal ``(1 - alpha) : alpha`` blends.
    Switch partners come from the whole corpus.
    """
    n = min(len(id_test), len(ood_test))
    rng = np.random.default_rng([seed, 7])
    normals = {}
    for origin, d in (("id", id_test), ("ood", ood_test)):
        keep = np.sort(rng.permutation(len(d))[:n]) if len(d) > n else np.arange(len(d))
        normals[origin] = d.subset(int(i) for i in keep)
    anomalies = {}
    for k, (origin, kind) in enumerate((o, a) for o in ("id", "ood") for a in ANOMALY_KINDS):
        anomalies[(origin, kind)] = inject(normals[origin], net, kind, pool=corpus, config=world,
                                           seed=[seed, 3 + k])
    return EvalSets(normals["id"], normals["ood"], anomalies)


def _metric_row(normal_scores: np.ndarray, anomaly_scores: np.ndarray) -> dict:
    if len(normal_scores) == 0 or len(anomaly_scores) == 0:
        return {}
    s = np.concatenate([normal_scores, anomaly_scores])
    y = np.concatenate([np.zeros(len(normal_scores), bool), np.ones(len(anomaly_scores), bool)])
    return {name: fn(s, y) for name, fn in METRICS.items()}


def _model_scores(terms: ScoreTerms, model: str, lam: float, ratio: float = 1.0) -> np.ndarray:
    if model == "full":
        return terms.scores(lam, ratio)
    if model == "tg_only":
        return terms.scores(0.0, ratio)
    if model == "rp_only":
        # Rarer segments carry larger log factors, so the plain sum ranks rare routes first.
        return terms.scaling(ratio)
    raise ValueError(f"unknown model {model!r}")


def _nested_take(n_total: int, frac: float, order: np.ndarray) -> np.ndarray:
    k = int(round(frac * n_total))
    return np.sort(order[:k])


def evaluate(bundle: ModelBundle, net: RoadNetwork, sets: EvalSets, config: SuiteConfig,
             seed: int) -> list[dict]:
    """Flat metric rows for one seed: section, condition, model, x, metric, value."""
    terms = {"id": score_terms(bundle, sets.id_normals, net),
             "ood": score_terms(bundle, sets.ood_normals, net)}
    for key, d in sets.anomalies.items():
        terms[key] = score_terms(bundle, d, net)
    rows = []
    skipped = set()

    def emit(section, condition, model, x, values):
        if not values:
            skipped.add(condition)
        for metric, value in values.items():
            rows.append({"section": section, "condition": condition, "model": model, "x": x,
                         "seed": seed, "metric": metric, "value": float(value)})

    for cond in CONDITIONS:
        origin, kind = cond.split("_")
        normal, anomal = terms[origin], terms[(origin, kind)]
        for model in MODELS:
            emit("table", cond, model, None,
                 _metric_row(_model_scores(normal, model, config.lam), _model_scores(anomal, model, config.lam)))
        for lam in config.lambdas:
            emit("lambda", cond, "full", float(lam),
                 _metric_row(normal.scores(lam), anomal.scores(lam)))
        for rho in config.ratios:
            emit("ratio", cond, "full", float(rho),
                 _metric_row(normal.scores(config.lam, rho), anomal.scores(config.lam, rho)))

    # Mixtures use one fixed permutation per set, so the selections are nested in alpha.
    rng = np.random.default_rng([seed, 8])
    base = {"id": terms["id"].scores(config.lam), "ood": terms["ood"].scores(config.lam)}
    perm = {k: rng.permutation(len(v)) for k, v in base.items()}
    for kind in ANOMALY_KINDS:
        anom = {o: terms[(o, kind)].scores(config.lam) for o in ("id", "ood")}
        aperm = {o: rng.permutation(len(v)) for o, v in anom.items()}
        for alpha in config.alphas:
            normal = np.concatenate([base["id"][_nested_take(len(base["id"]), 1 - alpha, perm["id"])],
                                     base["ood"][_nested_take(len(base["ood"]), alpha, perm["ood"])]])
            anomal = np.concatenate([anom["id"][_nested_take(len(anom["id"]), 1 - alpha, aperm["id"])],
                                     anom["ood"][_nested_take(len(anom["ood"]), alpha, aperm["ood"])]])
            emit("alpha", kind, "full", float(alpha), _metric_row(normal, anomal))
    if skipped:
        logger.warning("seed %d: cells with an empty class were skipped in %s", seed, sorted(skipped))
    return rows


def aggregate(rows: list[dict]) -> dict:
    """Seed mean and standard deviation for every (section, condition, model, x, metric)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["section"], r["condition"], r["model"], r["x"], r["metric"]), []).append(r["value"])
    out: dict = {}
    for (section, cond, model, x, metric), vals in sorted(groups.items(), key=lambda kv: str(kv[0])):
        cell = out.setdefault(section, {}).setdefault(cond, {}).setdefault(model, {})
        cell = cell.setdefault("-" if x is None else repr(x), {})
        cell[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
    return out


@dataclass
class ExperimentReport:
    config: dict
    digest: str
    rows: list
    sizes: dict
    losses: dict

    @property
    def summary(self) -> dict:
        return aggregate(self.rows)

    def mean(self, section: str, condition: str, model: str = "full", x=None, metric: str = "roc_auc") -> float:
        key = "-" if x is None else repr(float(x))
        return self.summary[section][condition][model][key][metric]["mean"]

    def to_dict(self) -> dict:
        return {"config": self.config, "digest": self.digest, "sizes": self.sizes,
                "losses": self.losses, "summary": self.summary, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "condition", "model", "x", "seed", "metric", "value"])
        for r in self.rows:
            w.writerow([r["section"], r["condition"], r["model"], "" if r["x"] is None else repr(r["x"]),
                        r["seed"], r["metric"], repr(r["value"])])
        return buf.getvalue()


def prepare_seed(config: SuiteConfig, seed: int):
    """World, split and evaluation sets for one seed."""
    net = grid_network(config.rows, config.cols)
    wcfg = WorldConfig(**{**config.world.to_dict(), "seed": seed})
    world = generate_world(net, wcfg)
    sp = split_dataset(world.corpus, config.n_candidate_pairs, seed, min_count=config.min_count)
    sets = build_eval_sets(net, world.corpus, sp.id_test, sp.ood_test, wcfg, seed)
    return net, sp, sets


def run_suite(config: SuiteConfig, bundles: dict | None = None,
              bundles_out: dict | None = None) -> ExperimentReport:
    """Train (unless bundles are supplied per seed) and evaluate every seed.

    Trained bundles are stored into ``bundles_out`` by seed when given.
    """
    rows, sizes, losses = [], {}, {}
    for seed in config.seeds:
        net, sp, sets = prepare_seed(config, seed)
        if bundles is not None and seed in bundles:
            bundle = bundles[seed]
        else:
            tcfg = TrainConfig(**{**asdict(config.train), "seed": seed})
            bundle = train(tcfg, sp.train, net)
        if bundles_out is not None:
            bundles_out[seed] = bundle
        logger.info("seed %d: evaluating %s", seed, sets.sizes())
        rows.extend(evaluate(bundle, net, sets, config, seed))
        sizes[str(seed)] = {"train": len(sp.train), **sets.sizes()}
        losses[str(seed)] = list(bundle.history)
    doc = config.to_dict()
    return ExperimentReport(doc, config_digest(doc), rows, sizes, losses)


# ---------------------------------------------------------------------- timing
def random_walk(net: RoadNetwork, length: int, rng: np.random.Generator) -> list[int]:
    """A walk of ``length`` segments; restarts at random if it hits a dead end."""
    seg = int(rng.integers(net.segment_count))
    walk = [seg]
    while len(walk) < length:
        nxt = net.neighbors(seg)
        seg = int(rng.choice(nxt)) if nxt else int(rng.integers(net.segment_count))
        if nxt:
            walk.append(seg)
        else:
            walk = [seg]
    return walk


def push_timing(bundle: ModelBundle, net: RoadNetwork, lengths=(10, 50, 100, 250, 500, 750, 1000),
                pushes_per_length: int = 1000, seed: int = 0, lam: float | None = None) -> dict:
    """Median per-push wall time and mean whole-session time per path length.

    For each length, enough walks are scored to reach ``pushes_per_length``
    pushes. Also reports the R^2 of a linear fit of session time on length.
    """
    rng = np.random.default_rng(seed)
    per_length = {}
    for n in lengths:
        walks = [random_walk(net, n, rng) for _ in range(max(1, -(-pushes_per_length // n)))]
        push_times, totals = [], []
        for walk in walks:
            t0 = time.perf_counter()
            sess = bundle.open_session((walk[0], walk[-1]), net, lam)
            for seg in walk:
                a = time.perf_counter()
                sess.push(seg)
                push_times.append(time.perf_counter() - a)
            totals.append(time.perf_counter() - t0)
        per_length[n] = {"median_push_s": float(np.median(push_times)),
                         "session_s": float(np.median(totals)), "sessions": len(walks)}
    x = np.array(list(per_length), dtype=float)
    y = np.array([v["session_s"] for v in per_length.values()])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    return {"per_length": {str(k): v for k, v in per_length.items()}, "linear_r2": r2,
            "slope_s_per_push": float(slope)}
