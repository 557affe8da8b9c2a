"""Joint training, debiased scoring and constant-time online sessions.

The anomaly score of a trajectory ``t`` with SD pair ``c`` is::

    score = NegELBO(c, t) - lam * sum_i log_factor[t_i]

where ``NegELBO = H_s + H_d + KL + sum_i -log P(t_i | c, t_<i)`` is taken at
the posterior mean. Higher means more anomalous.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diff_core import FORMAT_VERSION, ParamStore, Tape, Var, adam_step, const
from .road_graph import RoadNetwork
from .rp_vae import RpVae, ScalingTable, build_scaling_table
from .tg_vae import PathBatch, ScoringError, TgVae
from .trajectory import Dataset, SdPair, Trajectory, validate
from .validation import check_lambda, check_observed_ratio, check_trajectories

logger = logging.getLogger(__name__)


class BundleError(ValueError):
    pass


@dataclass
class TrainConfig:
    dim: int = 128
    lam: float = 0.1
    epochs: int = 200
    lr: float = 0.01
    batch_size: int = 64
    seed: int = 0
    scaling_samples: int = 1024
    clip_norm: float = 5.0


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


@dataclass(eq=False)
class ModelBundle:
    """All learned parameters plus hyperparameters and the optional scaling table."""

    store: ParamStore
    n_segments: int
    hyper: dict
    scaling: ScalingTable | None = None
    network_ref: str = ""
    history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.hyper["dim"])

    @property
    def lam(self) -> float:
        return float(self.hyper.get("lam", 0.1))

    @property
    def tg(self) -> TgVae:
        return TgVae(self.store, self.n_segments, self.dim)

    @property
    def rp(self) -> RpVae:
        return RpVae(self.store, self.n_segments, self.dim)

    @classmethod
    def initialize(cls, n_segments: int, config: TrainConfig, network_ref: str = "") -> "ModelBundle":
        rng = np.random.default_rng([config.seed, 0])
        store = ParamStore()
        TgVae.create(store, n_segments, config.dim, rng)
        RpVae.create(store, n_segments, config.dim, rng)
        return cls(store, n_segments, asdict(config), None, network_ref)

    def check_network(self, net: RoadNetwork) -> None:
        if net.segment_count != self.n_segments:
            raise BundleError(f"bundle vocabulary {self.n_segments} does not match network "
                              f"with {net.segment_count} segments")

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "n_segments": self.n_segments,
            "hyper": self.hyper,
            "config_digest": config_digest(self.hyper),
            "network_ref": self.network_ref,
            "history": self.history,
            "scaling": None if self.scaling is None else self.scaling.to_dict(),
            "params": self.store.to_dict()["params"],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelBundle":
        if doc.get("version") != FORMAT_VERSION:
            raise BundleError(f"unsupported bundle version {doc.get('version')!r}")
        store = ParamStore.from_dict({"version": FORMAT_VERSION, "params": doc["params"]})
        scaling = None if doc.get("scaling") is None else ScalingTable.from_dict(doc["scaling"])
        return cls(store, int(doc["n_segments"]), dict(doc["hyper"]), scaling,
                   doc.get("network_ref", ""), list(doc.get("history", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "ModelBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def open_session(self, sd, net: RoadNetwork, lam: float | None = None) -> "ScoreSession":
        return ScoreSession(self, sd, net, lam)


# ---------------------------------------------------------------------- training
def joint_loss(bundle: ModelBundle, tape: Tape, batch: PathBatch, net: RoadNetwork,
               rng: np.random.Generator) -> Var:
    """Batch mean of ``L1 + L2``; draws one reparameterisation sample per latent."""
    tg_noise = rng.standard_normal((batch.size, bundle.dim))
    segs = batch.paths[batch.active]
    rp_noise = rng.standard_normal((segs.size, bundle.dim))
    l1 = bundle.tg.loss(tape, batch, net, tg_noise)
    l2 = bundle.rp.loss(tape, segs, rp_noise)
    return tape.scale(tape.add(l1, l2), 1.0 / batch.size)


def train(config: TrainConfig, train_set: Sequence[Trajectory] | Dataset, net: RoadNetwork,
          build_table: bool = True, network_ref: str = "") -> ModelBundle:
    """Fit both VAEs jointly with Adam; optionally precompute the scaling table."""
    trajs = list(train_set)
    good = [t for t in trajs if not validate(t, net)]
    if len(good) < len(trajs):
        logger.warning("train: skipped %d invalid trajectories", len(trajs) - len(good))
    if not good:
        raise ValueError("training set has no valid trajectories")
    bundle = ModelBundle.initialize(net.segment_count, config, network_ref or net.name)
    rng = np.random.default_rng([config.seed, 1])
    n = len(good)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = PathBatch.from_trajectories([good[i] for i in order[start:start + config.batch_size]])
            tape = Tape()
            loss = joint_loss(bundle, tape, batch, net, rng)
            total += loss.item() * batch.size
            tape.backward(loss)
            adam_step(bundle.store, config.lr, clip_norm=config.clip_norm)
        bundle.history.append(total / n)
        logger.info("epoch %d/%d joint loss %.4f", epoch + 1, config.epochs, total / n)
    if build_table:
        bundle.scaling = build_scaling_table(bundle.rp, config.scaling_samples, config.seed)
    return bundle


# ---------------------------------------------------------------------- scoring
@dataclass
class ScoreTerms:
    """Per-trajectory pieces of the score, kept separate so prefixes and lambdas are cheap."""

    fixed: np.ndarray  # H_s + H_d + KL
    step_nll: np.ndarray  # (B, T) -log P(t_j | ...), zero-padded
    step_log_factor: np.ndarray  # (B, T) log_factor[t_j], zero-padded
    lengths: np.ndarray

    def prefix_lengths(self, observed_ratio: float = 1.0) -> np.ndarray:
        check_observed_ratio(observed_ratio)
        if observed_ratio >= 1.0:
            return self.lengths.copy()
        return np.maximum(1, np.ceil(observed_ratio * self.lengths - 1e-9).astype(np.int64))

    def _prefix_sum(self, arr: np.ndarray, observed_ratio: float) -> np.ndarray:
        keep = np.arange(arr.shape[1])[None, :] < self.prefix_lengths(observed_ratio)[:, None]
        return np.where(keep, arr, 0.0).sum(axis=1)

    def elbo(self, observed_ratio: float = 1.0) -> np.ndarray:
        return self.fixed + self._prefix_sum(self.step_nll, observed_ratio)

    def scaling(self, observed_ratio: float = 1.0) -> np.ndarray:
        return self._prefix_sum(self.step_log_factor, observed_ratio)

    def scores(self, lam: float, observed_ratio: float = 1.0) -> np.ndarray:
        check_lambda(lam)
        out = self.elbo(observed_ratio)
        if lam:
            out = out - lam * self.scaling(observed_ratio)
        return out


def score_terms(bundle: ModelBundle, trajs: Sequence[Trajectory], net: RoadNetwork,
                batch_size: int = 512) -> ScoreTerms:
    bundle.check_network(net)
    trajs = list(trajs)
    lengths = np.array([len(t) for t in trajs], dtype=np.int64)
    T = int(lengths.max()) if trajs else 0
    fixed = np.empty(len(trajs))
    step_nll = np.zeros((len(trajs), T))
    table = bundle.scaling.log_factor if bundle.scaling is not None else np.zeros(bundle.n_segments)
    step_lf = np.zeros((len(trajs), T))
    tg = bundle.tg
    for start in range(0, len(trajs), batch_size):
        chunk = trajs[start:start + batch_size]
        f, s = tg.score_terms(chunk, net)
        fixed[start:start + len(chunk)] = f
        step_nll[start:start + len(chunk), : s.shape[1]] = s
    for i, t in enumerate(trajs):
        step_lf[i, : len(t)] = table[list(t.path)]
    return ScoreTerms(fixed, step_nll, step_lf, lengths)


def _require_table(bundle: ModelBundle, lam: float) -> None:
    if lam > 0 and bundle.scaling is None:
        raise BundleError("lambda > 0 needs a scaling table; run precompute first")


def score_full(bundle: ModelBundle, t: Trajectory, lam: float, net: RoadNetwork) -> float:
    """Debiased anomaly score of one complete trajectory."""
    check_lambda(lam)
    _require_table(bundle, lam)
    return float(score_terms(bundle, [t], net).scores(lam)[0])


def score_dataset(bundle: ModelBundle, trajs: Sequence[Trajectory], lam: float, net: RoadNetwork,
                  observed_ratio: float = 1.0) -> np.ndarray:
    _require_table(bundle, lam)
    return score_terms(bundle, trajs, net).scores(lam, observed_ratio)


class ScoreSession:
    """Running score of one ongoing trajectory; each push costs one decoder step."""

    def __init__(self, bundle: ModelBundle, sd, net: RoadNetwork, lam: float | None = None):
        lam = bundle.lam if lam is None else lam
        check_lambda(lam)
        _require_table(bundle, lam)
        bundle.check_network(net)
        self.bundle = bundle
        self.net = net
        self.lam = float(lam)
        self.sd = SdPair(net.check_segment(sd[0]), net.check_segment(sd[1]))
        self._tg = bundle.tg
        self._table = bundle.scaling.log_factor if bundle.scaling is not None else None
        tape = Tape()
        mu, log_sigma = self._tg.encode(tape, [self.sd.source], [self.sd.destination])
        s_logits, d_logits = self._tg.decode_sd_logits(tape, mu)
        self.fixed = float(-tape.select_log_prob(s_logits, [self.sd.source]).value[0]
                           - tape.select_log_prob(d_logits, [self.sd.destination]).value[0]
                           + tape.kl_std_normal(mu, log_sigma).value[0])
        self.r = mu.value[0].copy()
        self.h: Var = const(mu.value)
        self.last: int | None = None
        self.likelihood = 0.0
        self.scaling_sum = 0.0
        self.steps = 0
        self._tape = tape

    @property
    def score(self) -> float:
        return self.fixed + self.likelihood - self.lam * self.scaling_sum

    def push(self, seg: int) -> float:
        seg = self.net.check_segment(seg)
        tape = self._tape
        if self.last is None:
            lp = self._tg.step_log_prob(tape, self.h, [seg], None)
        else:
            if not self.net.successor_mask[self.last, seg]:
                raise ScoringError(f"segment {seg} does not follow segment {self.last}")
            lp = self._tg.step_log_prob(tape, self.h, [seg], [self.last], net=self.net)
        self.likelihood += float(-lp.value[0])
        if self._table is not None:
            self.scaling_sum += float(self._table[seg])
        self.h = self._tg.advance(tape, self.h, [seg])
        self.last = seg
        self.steps += 1
        return self.score


# ---------------------------------------------------------------------- estimator
class CausalTAD(BaseEstimator):
    """Debiased trajectory anomaly detector with a scikit-learn style interface.

    ``fit`` takes a collection of map-matched trajectories (``Trajectory``
    objects or plain segment-id sequences) and trains both VAEs jointly.
    ``anomaly_score`` returns the debiased score (higher is more anomalous);
    ``score_samples`` returns its negation, following the convention that
    larger sample scores mean more normal.
    """

    def __init__(self, network: RoadNetwork | None = None, dim: int = 128, lam: float = 0.1,
                 epochs: int = 200, lr: float = 0.01, batch_size: int = 64,
                 scaling_samples: int = 1024, clip_norm: float = 5.0, random_state: int = 0):
        self.network = network
        self.dim = dim
        self.lam = lam
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.scaling_samples = scaling_samples
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(dim=self.dim, lam=self.lam, epochs=self.epochs, lr=self.lr,
                           batch_size=self.batch_size, seed=self.random_state,
                           scaling_samples=self.scaling_samples, clip_norm=self.clip_norm)

    def fit(self, X, y=None):
        if self.network is None:
            raise ValueError("CausalTAD needs a road network")
        check_lambda(self.lam)
        trajs = check_trajectories(X, self.network, strict=False)
        self.bundle_ = train(self._train_config(), trajs, self.network)
        self.loss_curve_ = list(self.bundle_.history)
        return self

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, network: RoadNetwork) -> "CausalTAD":
        bundle.check_network(network)
        h = bundle.hyper
        est = cls(network, dim=h["dim"], lam=h.get("lam", 0.1), epochs=h.get("epochs", 0),
                  lr=h.get("lr", 0.01), batch_size=h.get("batch_size", 64),
                  scaling_samples=h.get("scaling_samples", 1024), clip_norm=h.get("clip_norm", 5.0),
                  random_state=h.get("seed", 0))
        est.bundle_ = bundle
        est.loss_curve_ = list(bundle.history)
        return est

    def score_terms(self, X) -> ScoreTerms:
        check_is_fitted(self, "bundle_")
        return score_terms(self.bundle_, check_trajectories(X, self.network), self.network)

    def anomaly_score(self, X, lam: float | None = None, observed_ratio: float = 1.0) -> np.ndarray:
        lam = self.lam if lam is None else lam
        check_is_fitted(self, "bundle_")
        _require_table(self.bundle_, lam)
        return self.score_terms(X).scores(lam, observed_ratio)

    def score_samples(self, X) -> np.ndarray:
        return -self.anomaly_score(X)

    def open_session(self, sd, lam: float | None = None) -> ScoreSession:
        check_is_fitted(self, "bundle_")
        return ScoreSession(self.bundle_, sd, self.network, self.lam if lam is None else lam)
