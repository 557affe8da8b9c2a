"""Road-preference VAE and the per-segment debiasing scaling table.

Every segment is encoded and reconstructed on its own (no transitions, no
mask). The table entry for segment ``a`` is the Monte-Carlo log mean of
``1 / P(a | e)`` with ``e`` drawn from the encoder posterior of ``a``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .diff_core import ParamStore, Tape, Var, const, init_affine, init_embedding
from .trajectory import Trajectory

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))


class RpVae:
    """Parameter layout and forward passes; parameters live under ``rp.``."""

    def __init__(self, store: ParamStore, n_segments: int, dim: int):
        self.store = store
        self.n_segments = n_segments
        self.dim = dim

    @classmethod
    def create(cls, store: ParamStore, n_segments: int, dim: int, rng: np.random.Generator) -> "RpVae":
        V, d = n_segments, dim
        init_embedding(store, "rp.E_s", V, d, rng)
        init_affine(store, "rp.enc.hidden", d, d, rng)
        init_affine(store, "rp.enc.out", d, 2 * d, rng)
        init_affine(store, "rp.dec.hidden", d, d, rng)
        init_affine(store, "rp.dec.out", d, V, rng)
        return cls(store, n_segments, dim)

    def _affine(self, tape: Tape, x: Var, name: str, grad: bool) -> Var:
        return tape.affine(x, self.store.var(f"{name}.W", grad), self.store.var(f"{name}.b", grad))

    def encode(self, tape: Tape, segs, grad: bool = False) -> tuple[Var, Var]:
        x = tape.embedding(self.store.var("rp.E_s", grad), segs)
        out = self._affine(tape, tape.tanh(self._affine(tape, x, "rp.enc.hidden", grad)), "rp.enc.out", grad)
        return tape.slice_last(out, 0, self.dim), tape.slice_last(out, self.dim, 2 * self.dim)

    def decode(self, tape: Tape, e: Var, grad: bool = False) -> Var:
        return self._affine(tape, tape.tanh(self._affine(tape, e, "rp.dec.hidden", grad)), "rp.dec.out", grad)

    def terms(self, tape: Tape, segs, noise, grad: bool = False) -> tuple[Var, Var]:
        """Per-segment ``log P(seg | e)`` and KL for reparameterised samples."""
        segs = np.asarray(segs, dtype=np.int64)
        mu, log_sigma = self.encode(tape, segs, grad)
        e = tape.gaussian_reparam(mu, log_sigma, noise)
        log_p = tape.select_log_prob(self.decode(tape, e, grad), segs)
        return log_p, tape.kl_std_normal(mu, log_sigma)

    def loss(self, tape: Tape, segs, noise, grad: bool = True) -> Var:
        """Summed L2 over a flat array of segment occurrences."""
        log_p, kl = self.terms(tape, segs, noise, grad)
        return tape.sub(tape.sum(kl), tape.sum(log_p))

    # ------------------------------------------------------------ scaling factors
    def _posterior(self, segs) -> tuple[np.ndarray, np.ndarray]:
        mu, log_sigma = self.encode(Tape(), np.asarray(segs, dtype=np.int64))
        return mu.value, log_sigma.value

    def _segment_log_probs(self, segs: np.ndarray, e: np.ndarray) -> np.ndarray:
        logits = self.decode(Tape(), const(e)).value
        log_p = logits[np.arange(len(segs)), segs] - logsumexp(logits, axis=1)
        clamped = log_p < LOG_PROB_FLOOR
        if clamped.any():
            logger.warning("scaling factor: clamped %d probabilities below %g", int(clamped.sum()), PROB_FLOOR)
            log_p = np.maximum(log_p, LOG_PROB_FLOOR)
        return log_p

    def sample_neg_log_probs(self, seg: int, K: int, seed: int) -> np.ndarray:
        """``-log P(seg | e_k)`` for ``K`` posterior draws from the segment's own stream."""
        if K < 1:
            raise ValueError("K must be at least 1")
        mu, log_sigma = self._posterior([seg])
        noise = np.random.default_rng([seed, seg]).standard_normal((K, self.dim))
        e = mu + np.exp(log_sigma) * noise
        return -self._segment_log_probs(np.full(K, seg), e)


def log_mean_inverse(neg_log_probs: np.ndarray) -> float:
    """``log mean(1/P)`` from samples of ``-log P``, computed in log space."""
    ell = np.asarray(neg_log_probs, dtype=np.float64)
    return float(logsumexp(ell) - np.log(ell.size))


def loss_L2(model: RpVae, t: Trajectory, noise_seed: int | None = 0, noise=None) -> float:
    """L2 for one trajectory: per-segment reconstruction cross-entropy plus KL."""
    segs = np.asarray(t.path, dtype=np.int64)
    if noise is None:
        noise = np.random.default_rng(noise_seed).standard_normal((len(segs), model.dim))
    return float(model.loss(Tape(), segs, np.asarray(noise, dtype=np.float64), grad=False).value)


def log_scaling_factor(model: RpVae, seg: int, K: int, seed: int) -> float:
    """Monte-Carlo ``log E_{e ~ Q(E|seg)} [1 / P(seg | e)]``."""
    return log_mean_inverse(model.sample_neg_log_probs(seg, K, seed))


@dataclass(frozen=True, eq=False)
class ScalingTable:
    log_factor: np.ndarray
    K: int
    seed: int

    def __post_init__(self):
        arr = np.array(self.log_factor, dtype=np.float64)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ValueError("scaling table entries must be a finite 1-D array")
        arr.setflags(write=False)
        object.__setattr__(self, "log_factor", arr)

    def __len__(self):
        return self.log_factor.size

    def __eq__(self, other):
        return (isinstance(other, ScalingTable) and self.K == other.K and self.seed == other.seed
                and np.array_equal(self.log_factor, other.log_factor))

    @classmethod
    def zeros(cls, n_segments: int) -> "ScalingTable":
        return cls(np.zeros(n_segments), K=0, seed=0)

    def to_dict(self) -> dict:
        return {"K": int(self.K), "seed": int(self.seed), "log_factor": self.log_factor.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScalingTable":
        return cls(np.asarray(doc["log_factor"], dtype=np.float64), int(doc["K"]), int(doc["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "ScalingTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_scaling_table(model: RpVae, K: int = 1024, seed: int = 0, chunk: int = 16) -> ScalingTable:
    """Scaling factor for every segment; entry ``a`` uses the stream ``(seed, a)``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    V = model.n_segments
    mu, log_sigma = model._posterior(np.arange(V))
    out = np.empty(V)
    for start in range(0, V, chunk):
        segs = np.arange(start, min(start + chunk, V))
        noise = np.concatenate([np.random.default_rng([seed, int(s)]).standard_normal((K, model.dim))
                                for s in segs])
        rep = np.repeat(segs, K)
        e = mu[rep] + np.exp(log_sigma[rep]) * noise
        ell = -model._segment_log_probs(rep, e).reshape(len(segs), K)
        out[segs] = logsumexp(ell, axis=1) - np.log(K)
    return ScalingTable(out, K, seed)
