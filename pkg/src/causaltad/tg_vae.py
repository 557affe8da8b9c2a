"""Trajectory-generation VAE: SD encoder, SD decoder and road-constrained GRU decoder.

The posterior over the latent route code ``r`` depends on the SD pair only,
never on the trajectory, so online scoring needs a single encoder call per
trip. The trajectory decoder is teacher-forced: step ``j`` predicts ``t_j``
from ``h_{j-1}`` (``h_0 = r``) over the successors of ``t_{j-1}`` (the full
vocabulary at step 1), then consumes ``t_j`` with one GRU step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diff_core import (ParamStore, Tape, Var, const, gru_params, init_affine,
                        init_embedding, init_gru)
from .road_graph import RoadNetwork
from .trajectory import Trajectory


class ScoringError(ValueError):
    """A trajectory step falls outside the road-constrained support."""


@dataclass
class PathBatch:
    """Right-padded batch of paths."""

    paths: np.ndarray  # (B, T) int64, padded with 0
    lengths: np.ndarray  # (B,)
    sources: np.ndarray
    dests: np.ndarray

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "PathBatch":
        lengths = np.array([len(t) for t in trajs], dtype=np.int64)
        T = int(lengths.max()) if len(trajs) else 0
        paths = np.zeros((len(trajs), T), dtype=np.int64)
        for i, t in enumerate(trajs):
            paths[i, : len(t)] = t.path
        sources = np.array([t.sd.source for t in trajs], dtype=np.int64)
        dests = np.array([t.sd.destination for t in trajs], dtype=np.int64)
        return cls(paths, lengths, sources, dests)

    @property
    def size(self) -> int:
        return int(self.lengths.size)

    @property
    def active(self) -> np.ndarray:
        return np.arange(self.paths.shape[1])[None, :] < self.lengths[:, None]


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    log_sigma: np.ndarray


def check_support(batch: PathBatch, net: RoadNetwork) -> None:
    """Raise :class:`ScoringError` at the first step that leaves the neighbour mask."""
    succ = net.successor_mask
    n = net.segment_count
    for b in range(batch.size):
        path = batch.paths[b, : batch.lengths[b]]
        if path.min() < 0 or path.max() >= n:
            raise ScoringError(f"trajectory {b}: segment id outside the network")
        bad = np.flatnonzero(~succ[path[:-1], path[1:]])
        if bad.size:
            j = int(bad[0])
            raise ScoringError(
                f"trajectory {b}: step {j + 2} moves {path[j]} -> {path[j + 1]}, which are not adjacent"
            )


class TgVae:
    """Parameter layout and forward passes; parameters live under ``tg.`` in a shared store."""

    def __init__(self, store: ParamStore, n_segments: int, dim: int):
        self.store = store
        self.n_segments = n_segments
        self.dim = dim

    @classmethod
    def create(cls, store: ParamStore, n_segments: int, dim: int, rng: np.random.Generator) -> "TgVae":
        V, d = n_segments, dim
        init_embedding(store, "tg.E_c", V, d, rng)
        init_embedding(store, "tg.E_r", V, d, rng)
        init_affine(store, "tg.enc.hidden", 2 * d, d, rng)
        init_affine(store, "tg.enc.out", d, 2 * d, rng)
        init_affine(store, "tg.sd_dec.hidden", d, d, rng)
        init_affine(store, "tg.sd_dec.src", d, V, rng)
        init_affine(store, "tg.sd_dec.dst", d, V, rng)
        init_gru(store, "tg.gru", d, d, rng)
        init_affine(store, "tg.head", d, V, rng)
        return cls(store, n_segments, dim)

    def _affine(self, tape: Tape, x: Var, name: str, grad: bool) -> Var:
        return tape.affine(x, self.store.var(f"{name}.W", grad), self.store.var(f"{name}.b", grad))

    # ------------------------------------------------------------ batched forward
    def encode(self, tape: Tape, sources, dests, grad: bool = False) -> tuple[Var, Var]:
        E_c = self.store.var("tg.E_c", grad)
        x = tape.concat([tape.embedding(E_c, sources), tape.embedding(E_c, dests)])
        hidden = tape.tanh(self._affine(tape, x, "tg.enc.hidden", grad))
        out = self._affine(tape, hidden, "tg.enc.out", grad)
        return tape.slice_last(out, 0, self.dim), tape.slice_last(out, self.dim, 2 * self.dim)

    def decode_sd_logits(self, tape: Tape, r: Var, grad: bool = False) -> tuple[Var, Var]:
        hidden = tape.tanh(self._affine(tape, r, "tg.sd_dec.hidden", grad))
        return (self._affine(tape, hidden, "tg.sd_dec.src", grad),
                self._affine(tape, hidden, "tg.sd_dec.dst", grad))

    def step_log_prob(self, tape: Tape, h: Var, targets, prev, grad: bool = False,
                      net: RoadNetwork | None = None, active=None) -> Var:
        """Log-probability of ``targets`` given state ``h`` and previous segments ``prev``.

        ``prev=None`` means the first step (unmasked). Inactive (padded) rows
        get an all-true mask and target 0; callers weight them out.
        """
        logits = self._affine(tape, h, "tg.head", grad)
        targets = np.asarray(targets, dtype=np.int64)
        if prev is None:
            mask = None
            if active is not None:
                targets = np.where(active, targets, 0)
        else:
            mask = net.successor_mask[np.asarray(prev, dtype=np.int64)]
            if active is not None and not np.all(active):
                mask = mask.copy()
                mask[~active] = True
                targets = np.where(active, targets, 0)
        return tape.select_log_prob(logits, targets, mask)

    def advance(self, tape: Tape, h: Var, segs, grad: bool = False) -> Var:
        x = tape.embedding(self.store.var("tg.E_r", grad), segs)
        return tape.gru_cell(h, x, gru_params(self.store, "tg.gru", grad))

    def decode_steps(self, tape: Tape, r: Var, batch: PathBatch, net: RoadNetwork,
                     grad: bool = False) -> Var:
        """(B, T) per-step log-probabilities (padded entries are meaningless)."""
        active = batch.active
        T = batch.paths.shape[1]
        h = r
        steps = []
        for j in range(T):
            prev = None if j == 0 else batch.paths[:, j - 1]
            steps.append(self.step_log_prob(tape, h, batch.paths[:, j], prev, grad, net, active[:, j]))
            if j < T - 1:
                h = self.advance(tape, h, batch.paths[:, j], grad)
        return tape.stack(steps, axis=1)

    def terms(self, tape: Tape, batch: PathBatch, net: RoadNetwork, noise=None,
              grad: bool = False, pinned_posterior: bool = False) -> dict[str, Var]:
        """Per-trajectory loss components.

        ``noise=None`` decodes from the posterior mean; otherwise ``r`` is the
        reparameterised sample ``mu + sigma * noise``. ``pinned_posterior``
        replaces the encoder output by (0, 0) (used for definitional checks).
        """
        B = batch.size
        if pinned_posterior:
            mu, log_sigma = const(np.zeros((B, self.dim))), const(np.zeros((B, self.dim)))
        else:
            mu, log_sigma = self.encode(tape, batch.sources, batch.dests, grad)
        r = mu if noise is None else tape.gaussian_reparam(mu, log_sigma, noise)
        s_logits, d_logits = self.decode_sd_logits(tape, r, grad)
        return {
            "log_p_s": tape.select_log_prob(s_logits, batch.sources),
            "log_p_d": tape.select_log_prob(d_logits, batch.dests),
            "step_log_p": self.decode_steps(tape, r, batch, net, grad),
            "kl": tape.kl_std_normal(mu, log_sigma),
        }

    def loss(self, tape: Tape, batch: PathBatch, net: RoadNetwork, noise=None,
             grad: bool = True) -> Var:
        """Summed L1 over the batch (negated log-likelihood terms plus KL)."""
        t = self.terms(tape, batch, net, noise, grad)
        nll_sd = tape.scale(tape.add(t["log_p_s"], t["log_p_d"]), -1.0)
        per_row = tape.add(nll_sd, t["kl"])
        total = tape.sum(per_row)
        traj = tape.weighted_sum(t["step_log_p"], -batch.active.astype(np.float64))
        return tape.add(total, traj)

    # ------------------------------------------------------------ numpy scoring
    def score_terms(self, trajs: Sequence[Trajectory], net: RoadNetwork) -> tuple[np.ndarray, np.ndarray]:
        """Mean-posterior scoring terms.

        Returns ``(fixed, step_nll)``: ``fixed[b] = H_s + H_d + KL`` and
        ``step_nll[b, j] = -log P(t_j | ...)`` (zero beyond each length).
        """
        batch = PathBatch.from_trajectories(trajs)
        check_support(batch, net)
        tape = Tape()
        t = self.terms(tape, batch, net)
        fixed = -t["log_p_s"].value - t["log_p_d"].value + t["kl"].value
        step_nll = np.where(batch.active, -t["step_log_p"].value, 0.0)
        return fixed, step_nll


# ---------------------------------------------------------------------- single-trajectory API
def encode_sd(model: TgVae, c) -> GaussianPosterior:
    mu, log_sigma = model.encode(Tape(), [int(c[0])], [int(c[1])])
    return GaussianPosterior(mu.value[0].copy(), log_sigma.value[0].copy())


def decode_sd(model: TgVae, r) -> tuple[np.ndarray, np.ndarray]:
    s, d = model.decode_sd_logits(Tape(), const(np.asarray(r, dtype=np.float64)[None, :]))
    return s.value[0], d.value[0]


def decode_traj(model: TgVae, r, t: Trajectory, net: RoadNetwork) -> np.ndarray:
    """Teacher-forced ``log P(t_j | ...)`` for ``j = 1..n`` from latent ``r``."""
    batch = PathBatch.from_trajectories([t])
    check_support(batch, net)
    steps = model.decode_steps(Tape(), const(np.asarray(r, dtype=np.float64)[None, :]), batch, net)
    return steps.value[0]


def _breakdown(t: dict[str, Var]) -> dict[str, float]:
    return {
        "H_s": float(-t["log_p_s"].value[0]),
        "H_d": float(-t["log_p_d"].value[0]),
        "H_traj": float(-t["step_log_p"].value[0].sum()),
        "KL": float(t["kl"].value[0]),
    }


def loss_L1(model: TgVae, t: Trajectory, net: RoadNetwork, noise_seed: int | None = 0,
            noise=None, pinned_posterior: bool = False) -> tuple[float, dict[str, float]]:
    """Single-sample L1 estimate for one trajectory and its breakdown.

    ``noise`` (a ``dim`` vector) overrides ``noise_seed``; an all-zero noise
    decodes from the posterior mean.
    """
    batch = PathBatch.from_trajectories([t])
    check_support(batch, net)
    if noise is None:
        noise = np.random.default_rng(noise_seed).standard_normal(model.dim)
    noise = np.asarray(noise, dtype=np.float64).reshape(1, model.dim)
    terms = model.terms(Tape(), batch, net, noise=noise, pinned_posterior=pinned_posterior)
    parts = _breakdown(terms)
    return sum(parts.values()), parts


def neg_elbo(model: TgVae, t: Trajectory, net: RoadNetwork, mode: str = "mean", K: int = 1,
             seed: int = 0, pinned_posterior: bool = False) -> float:
    """Negative ELBO of ``(c, t)``: an upper bound on ``-log P(c, t)``.

    ``mode="mean"`` decodes from the posterior mean (deterministic);
    ``mode="sample"`` averages ``K`` reparameterised draws.
    """
    batch = PathBatch.from_trajectories([t])
    check_support(batch, net)
    if mode == "mean":
        parts = _breakdown(model.terms(Tape(), batch, net, pinned_posterior=pinned_posterior))
        return sum(parts.values())
    if mode != "sample":
        raise ValueError(f"unknown mode {mode!r}")
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    rep = PathBatch(np.repeat(batch.paths, K, axis=0), np.repeat(batch.lengths, K),
                    np.repeat(batch.sources, K), np.repeat(batch.dests, K))
    terms = model.terms(Tape(), rep, net, noise=rng.standard_normal((K, model.dim)),
                        pinned_posterior=pinned_posterior)
    per = (-terms["log_p_s"].value - terms["log_p_d"].value + terms["kl"].value
           - np.where(rep.active, terms["step_log_p"].value, 0.0).sum(axis=1))
    return float(per.mean())
