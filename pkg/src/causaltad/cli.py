"""Command-line entry point: ``causaltad <command> [flags]``.

Each command reads an optional flat JSON ``--config`` document; explicit
flags override it. Every command writes a ``*.manifest.json`` (or
``manifest.json`` in output directories) recording the resolved settings and
their digest. Failures print one JSON line ``{"error": kind, "detail": ...}``
on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .detector import BundleError, ModelBundle, TrainConfig, config_digest, score_terms, train
from .experiments import EvalSets, ExperimentReport, SuiteConfig, build_eval_sets, evaluate, push_timing, run_suite
from .road_graph import NetworkError, RoadNetwork, grid_network
from .rp_vae import build_scaling_table
from .tg_vae import ScoringError
from .trajectory import DatasetError, read_dataset, split_dataset, write_dataset
from .world import WorldConfig, WorldError, generate_world, inject

logger = logging.getLogger("causaltad")


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        super().__init__(detail)
        self.kind = kind
        self.detail = detail


_WORLD = WorldConfig()
_TRAIN = TrainConfig()
_SUITE = SuiteConfig()

# Every key a config document may contain, with its default.
RUN_DEFAULTS = {
    "rows": 20, "cols": 20, "length_model": "constant", "net_seed": 0,
    **{f.name: getattr(_WORLD, f.name) for f in fields(WorldConfig) if f.name != "seed"},
    "world_seed": 0,
    "n_candidate_pairs": 50, "min_count": 100,
    **{f.name: getattr(_TRAIN, f.name) for f in fields(TrainConfig)},
    "observed_ratio": 1.0, "strategy": "detour",
    "seeds": list(_SUITE.seeds), "lambdas": list(_SUITE.lambdas),
    "alphas": list(_SUITE.alphas), "ratios": list(_SUITE.ratios),
}
RUN_DEFAULTS["detour_band"] = list(_WORLD.detour_band)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


# ---------------------------------------------------------------------- helpers
def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing_file", str(p))
    return p


def _write_once(path) -> Path:
    p = Path(path)
    if p.exists():
        raise CliError("output_exists", str(p))
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(path: Path, command: str, settings: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "config": settings,
           "config_digest": config_digest(settings), **(extra or {})}
    _write_once(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _world_config(a) -> WorldConfig:
    return WorldConfig(popularity_exponent=a.popularity_exponent, route_temperature=a.route_temperature,
                       pairs_total=a.pairs_total, trajectories_per_pair=a.trajectories_per_pair,
                       seed=a.world_seed, tail_pairs=a.tail_pairs,
                       tail_trajectories_per_pair=a.tail_trajectories_per_pair,
                       tail_popularity_exponent=a.tail_popularity_exponent, min_length=a.min_length,
                       detour_band=tuple(a.detour_band), switch_threshold=a.switch_threshold,
                       preference_smoothing=a.preference_smoothing)


def _train_config(a) -> TrainConfig:
    return TrainConfig(dim=a.dim, lam=a.lam, epochs=a.epochs, lr=a.lr, batch_size=a.batch_size,
                       seed=a.seed, scaling_samples=a.scaling_samples, clip_norm=a.clip_norm)


def _settings(a, keys) -> dict:
    out = {}
    for k in keys:
        v = getattr(a, k)
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _load_net(path) -> RoadNetwork:
    return RoadNetwork.load(_need(path))


# ---------------------------------------------------------------------- commands
def cmd_gen_net(a):
    net = grid_network(a.rows, a.cols, a.length_model, seed=a.net_seed)
    out = _write_once(a.out)
    net.save(out)
    _manifest(_sidecar(out), "gen-net", _settings(a, ("rows", "cols", "length_model", "net_seed")))


WORLD_FLAGS = tuple(f.name for f in fields(WorldConfig) if f.name != "seed") + ("world_seed",)
WORLD_KEYS = WORLD_FLAGS + ("n_candidate_pairs", "min_count")


def cmd_gen_world(a):
    net = _load_net(a.net)
    wcfg = _world_config(a)
    out = Path(a.out_dir)
    world = generate_world(net, wcfg)
    sp = split_dataset(world.corpus, a.n_candidate_pairs, a.world_seed, min_count=a.min_count)
    sets = build_eval_sets(net, world.corpus, sp.id_test, sp.ood_test, wcfg, a.world_seed)
    files = {"corpus": world.corpus, "train": sp.train, "id": sets.id_normals, "ood": sets.ood_normals}
    for (origin, kind), d in sets.anomalies.items():
        files[f"{origin}_{kind}"] = d
    for name, d in files.items():
        write_dataset(d, _write_once(out / f"{name}.jsonl"))
    _manifest(out / "manifest.json", "gen-world", _settings(a, WORLD_KEYS),
              {"sizes": {k: len(v) for k, v in files.items()},
               "candidate_pairs": [list(p) for p in sp.candidate_pairs],
               "network": str(a.net)})


def cmd_inject(a):
    net = _load_net(a.net)
    source = read_dataset(_need(a.input), net, strict=True)
    pool = read_dataset(_need(a.pool), net) if a.pool else None
    wcfg = WorldConfig(detour_band=tuple(a.detour_band), switch_threshold=a.switch_threshold)
    d = inject(source, net, a.strategy, pool=pool, config=wcfg, seed=a.seed)
    out = _write_once(a.out)
    write_dataset(d, out)
    _manifest(_sidecar(out), "inject",
              _settings(a, ("strategy", "seed", "detour_band", "switch_threshold")),
              {"input": str(a.input), "produced": len(d), "attempted": len(source)})


def cmd_split(a):
    d = read_dataset(_need(a.input))
    sp = split_dataset(d, a.n_candidate_pairs, a.seed, min_count=a.min_count)
    out = Path(a.out_dir)
    for name in ("train", "id_test", "ood_test"):
        write_dataset(getattr(sp, name), _write_once(out / f"{name}.jsonl"))
    _manifest(out / "manifest.json", "split", _settings(a, ("n_candidate_pairs", "seed", "min_count")),
              {"candidate_pairs": [list(p) for p in sp.candidate_pairs]})


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


def cmd_train(a):
    net = _load_net(a.net)
    data = read_dataset(_need(a.train))
    bundle = train(_train_config(a), data, net, build_table=not a.no_table, network_ref=str(a.net))
    out = _write_once(a.out)
    bundle.save(out)
    _manifest(_sidecar(out), "train", _settings(a, TRAIN_KEYS), {"train": str(a.train)})


def cmd_precompute(a):
    bundle = ModelBundle.load(_need(a.bundle))
    bundle.scaling = build_scaling_table(bundle.rp, a.scaling_samples, a.seed)
    out = _write_once(a.out)
    bundle.save(out)
    _manifest(_sidecar(out), "precompute", _settings(a, ("scaling_samples", "seed")),
              {"bundle": str(a.bundle)})


def cmd_score(a):
    net = _load_net(a.net)
    bundle = ModelBundle.load(_need(a.bundle))
    if a.lam > 0 and bundle.scaling is None:
        raise CliError("missing_table", f"{a.bundle} has no scaling table; run precompute")
    data = read_dataset(_need(a.input), net, strict=True, min_length=1)
    terms = score_terms(bundle, data, net)
    scores = terms.scores(a.lam, a.observed_ratio)
    elbo = terms.elbo(a.observed_ratio)
    scaling = terms.scaling(a.observed_ratio)
    out = _write_once(a.out)
    with out.open("w") as fh:
        for t, s, e, c in zip(data, scores, elbo, scaling):
            fh.write(json.dumps({"score": float(s), "label": t.label,
                                 "terms": {"elbo": float(e), "scaling": float(c)}},
                                separators=(",", ":")) + "\n")
    _manifest(_sidecar(out), "score", _settings(a, ("lam", "observed_ratio")),
              {"bundle": str(a.bundle), "input": str(a.input)})


def _suite_from_args(a) -> SuiteConfig:
    wcfg = _world_config(a)
    return SuiteConfig(rows=a.rows, cols=a.cols, world=wcfg, train=_train_config(a),
                       n_candidate_pairs=a.n_candidate_pairs, min_count=a.min_count,
                       seeds=tuple(a.seeds), lam=a.lam, lambdas=tuple(a.lambdas),
                       alphas=tuple(a.alphas), ratios=tuple(a.ratios))


def _write_report(report: ExperimentReport, out: Path) -> None:
    _write_once(out / "report.json").write_text(report.to_json())
    _write_once(out / "rows.csv").write_text(report.to_csv())


def cmd_eval(a):
    """Evaluate one bundle against a directory written by ``gen-world``."""
    net = _load_net(a.net)
    bundle = ModelBundle.load(_need(a.bundle))
    wdir = _need(a.world_dir)

    def load(name):
        return read_dataset(_need(wdir / f"{name}.jsonl"), net, strict=True)

    sets = EvalSets(load("id"), load("ood"),
                    {(o, k): load(f"{o}_{k}") for o in ("id", "ood") for k in ("detour", "switch")})
    config = _suite_from_args(a)
    rows = evaluate(bundle, net, sets, config, int(bundle.hyper.get("seed", 0)))
    doc = config.to_dict()
    report = ExperimentReport(doc, config_digest(doc), rows, {"0": sets.sizes()}, {})
    out = Path(a.out_dir)
    _write_report(report, out)
    if a.timing:
        _write_once(out / "timing.json").write_text(json.dumps(push_timing(bundle, net), indent=1) + "\n")


def cmd_sweep(a):
    """Full seed-replicated suite: world, split, training and evaluation per seed."""
    config = _suite_from_args(a)
    if a.jobs != 1:
        logger.warning("--jobs %d requested; seeds run sequentially in this build", a.jobs)
    bundles: dict = {}
    report = run_suite(config, bundles_out=bundles)
    out = Path(a.out_dir)
    _write_report(report, out)
    if a.timing:
        net = grid_network(config.rows, config.cols)
        timing = push_timing(bundles[config.seeds[0]], net)
        _write_once(out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")


# ---------------------------------------------------------------------- parser
FLAG_HELP = {
    "rows": "grid rows", "cols": "grid columns", "length_model": "segment lengths: constant or uniform",
    "net_seed": "seed for uniform segment lengths",
    "popularity_exponent": "gamma: how strongly preference drives SD popularity",
    "route_temperature": "tau: log-normal route cost noise",
    "pairs_total": "head SD pairs", "trajectories_per_pair": "trips per head pair",
    "tail_pairs": "extra rarely travelled SD pairs", "tail_trajectories_per_pair": "trips per tail pair",
    "tail_popularity_exponent": "gamma used for tail pairs", "min_length": "minimum route length in segments",
    "detour_band": "allowed relative cost increase of a detour (lo,hi)",
    "switch_threshold": "maximum Jaccard similarity of a switch partner",
    "preference_smoothing": "neighbourhood averaging passes over preferences",
    "world_seed": "world generation seed",
    "n_candidate_pairs": "most frequent SD pairs eligible for the ID split",
    "min_count": "minimum trips for a candidate pair",
    "dim": "hidden dimension", "lam": "debiasing weight lambda", "epochs": "training epochs",
    "lr": "Adam learning rate", "batch_size": "trajectories per batch", "seed": "random seed",
    "scaling_samples": "Monte-Carlo samples per scaling factor", "clip_norm": "global gradient norm clip",
    "observed_ratio": "fraction of each trajectory observed", "strategy": "anomaly type: detour or switch",
    "seeds": "seeds to replicate over", "lambdas": "lambda sweep values", "alphas": "mixture ratios",
    "ratios": "observed-ratio sweep values",
}


def _add(p, *names, **kw):
    """Register flags whose dest is a RUN_DEFAULTS key, defaulting from it."""
    for name in names:
        default = RUN_DEFAULTS[name]
        flag = "--lambda" if name == "lam" else "--" + name.replace("_", "-")
        opts = {"dest": name, "default": default, "help": FLAG_HELP[name], **kw}
        if isinstance(default, list):
            conv = _ints if name == "seeds" else _floats
            p.add_argument(flag, type=conv, metavar="A,B,...", **opts)
        else:
            p.add_argument(flag, type=type(default), **opts)


def _world_flags(p):
    _add(p, *WORLD_FLAGS)


def _train_flags(p):
    _add(p, *TRAIN_KEYS)


def _eval_flags(p):
    _add(p, "rows", "cols", "n_candidate_pairs", "min_count", "seeds", "lambdas", "alphas", "ratios")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="causaltad", description="Debiased trajectory anomaly detection.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="flat JSON document of settings; flags win")
        p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress")
        p.set_defaults(func=fn)
        return p

    p = command("gen-net", cmd_gen_net, "write a grid road network")
    _add(p, "rows", "cols", "length_model", "net_seed")
    p.add_argument("--out", required=True, help="network JSON to create")

    p = command("gen-world", cmd_gen_world, "generate a confounded corpus, its split and anomaly sets")
    p.add_argument("--net", required=True, help="network JSON")
    p.add_argument("--out-dir", required=True, help="directory for the dataset files")
    _world_flags(p)
    _add(p, "n_candidate_pairs", "min_count")

    p = command("inject", cmd_inject, "derive detour or switch anomalies from a dataset")
    p.add_argument("--net", required=True, help="network JSON")
    p.add_argument("--input", required=True, help="source trajectories (JSONL)")
    p.add_argument("--pool", default=None, help="switch partners (JSONL); default: the input")
    p.add_argument("--out", required=True, help="anomaly JSONL to create")
    _add(p, "strategy", "seed", "detour_band", "switch_threshold")

    p = command("split", cmd_split, "split a corpus into train, ID test and OOD test")
    p.add_argument("--input", required=True, help="corpus JSONL")
    p.add_argument("--out-dir", required=True, help="directory for the split files")
    _add(p, "n_candidate_pairs", "seed", "min_count")

    p = command("train", cmd_train, "train both VAEs jointly and precompute the scaling table")
    p.add_argument("--net", required=True, help="network JSON")
    p.add_argument("--train", required=True, help="training trajectories (JSONL)")
    p.add_argument("--out", required=True, help="bundle JSON to create")
    p.add_argument("--no-table", action="store_true", default=False, help="skip the scaling table")
    _train_flags(p)

    p = command("precompute", cmd_precompute, "(re)build the per-segment scaling table of a bundle")
    p.add_argument("--bundle", required=True, help="input bundle JSON")
    p.add_argument("--out", required=True, help="bundle JSON to create")
    _add(p, "scaling_samples", "seed")

    p = command("score", cmd_score, "score every trajectory of a dataset")
    p.add_argument("--net", required=True, help="network JSON")
    p.add_argument("--bundle", required=True, help="bundle JSON")
    p.add_argument("--input", required=True, help="trajectories (JSONL)")
    p.add_argument("--out", required=True, help="score JSONL to create")
    _add(p, "lam")
    _add(p, "observed_ratio")

    p = command("eval", cmd_eval, "evaluate one bundle on a gen-world directory")
    p.add_argument("--net", required=True, help="network JSON")
    p.add_argument("--bundle", required=True, help="bundle JSON")
    p.add_argument("--world-dir", required=True, help="directory written by gen-world")
    p.add_argument("--out-dir", required=True, help="directory for report.json and rows.csv")
    p.add_argument("--timing", action="store_true", default=False, help="also write timing.json")
    _eval_flags(p)
    _world_flags(p)
    _train_flags(p)

    p = command("sweep", cmd_sweep, "run the full seed-replicated experiment suite")
    p.add_argument("--out-dir", required=True, help="directory for report.json and rows.csv")
    p.add_argument("--timing", action="store_true", default=False, help="also write timing.json")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (seeds run sequentially)")
    _eval_flags(p)
    _world_flags(p)
    _train_flags(p)
    p.set_defaults(**{"dim": 32, "epochs": 30, "min_length": 8, "pairs_total": 60,
                      "trajectories_per_pair": 200})
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    doc = json.loads(_need(args.config).read_text())
    if not isinstance(doc, dict):
        raise CliError("schema", f"{args.config}: expected a JSON object")
    unknown = sorted(set(doc) - set(RUN_DEFAULTS))
    if unknown:
        raise CliError("unknown_key", f"{args.config}: {', '.join(unknown)}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    sub.set_defaults(**{k: v for k, v in doc.items() if k in dests})
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CliError as e:
        return _fail(e.kind, e.detail)
    except (NetworkError, DatasetError, BundleError, ScoringError, WorldError) as e:
        return _fail(type(e).__name__, str(e))
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        return _fail("invalid_input", str(e))
    return 0


def _fail(kind: str, detail: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "detail": detail}) + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
