"""Small reverse-mode autodiff kernel with the op set the two VAEs need.

Everything is float64. Each forward op computes its value eagerly and, when
any input requires a gradient, appends a backward closure to the active
:class:`Tape`. :meth:`Tape.backward` replays those closures in exact reverse
order. Parameters live in a :class:`ParamStore`; their ``Var`` handles share
the store's gradient buffers, so gradients accumulate in place across calls
until :meth:`ParamStore.zero_grad` or :func:`adam_step`.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

FORMAT_VERSION = 1


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, grad: np.ndarray | None = None,
                 name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


def const(x) -> Var:
    return Var(x, requires_grad=False)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_same(op, *vars_):
    shapes = [v.shape for v in vars_]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"{op}: shape mismatch {shapes}")


class Tape:
    """Records one forward pass for reverse-mode differentiation."""

    def __init__(self):
        self._ops: list[tuple[Var, Callable[[np.ndarray], None]]] = []

    def __len__(self):
        return len(self._ops)

    def clear(self):
        self._ops.clear()

    def _emit(self, op: str, value: np.ndarray, inputs: Sequence[Var], backward) -> Var:
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{op}: non-finite values in output")
        needs = any(v.requires_grad for v in inputs)
        out = Var(value, requires_grad=needs)
        if needs:
            self._ops.append((out, backward))
        return out

    def backward(self, loss: Var) -> None:
        """Back-propagate from scalar ``loss``; clears the tape afterwards."""
        if not self._ops:
            raise TapeError("backward called without a recorded forward pass")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if not any(out is loss for out, _ in self._ops):
            raise TapeError("backward: loss was not produced on this tape")
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)
        self.clear()

    # ------------------------------------------------------------ elementwise
    def add(self, a: Var, b: Var) -> Var:
        _check_same("add", a, b)

        def back(g):
            a.accumulate(g)
            b.accumulate(g)
        return self._emit("add", a.value + b.value, (a, b), back)

    def sub(self, a: Var, b: Var) -> Var:
        _check_same("sub", a, b)

        def back(g):
            a.accumulate(g)
            b.accumulate(-g)
        return self._emit("sub", a.value - b.value, (a, b), back)

    def mul(self, a: Var, b: Var) -> Var:
        _check_same("mul", a, b)

        def back(g):
            a.accumulate(g * b.value)
            b.accumulate(g * a.value)
        return self._emit("mul", a.value * b.value, (a, b), back)

    def scale(self, x: Var, c: float) -> Var:
        return self._emit("scale", x.value * c, (x,), lambda g: x.accumulate(g * c))

    def tanh(self, x: Var) -> Var:
        y = np.tanh(x.value)
        return self._emit("tanh", y, (x,), lambda g: x.accumulate(g * (1.0 - y * y)))

    def sigmoid(self, x: Var) -> Var:
        y = _sigmoid(x.value)
        return self._emit("sigmoid", y, (x,), lambda g: x.accumulate(g * y * (1.0 - y)))

    def exp(self, x: Var) -> Var:
        y = np.exp(x.value)
        return self._emit("exp", y, (x,), lambda g: x.accumulate(g * y))

    # ------------------------------------------------------------ reductions
    def sum(self, x: Var) -> Var:
        return self._emit("sum", np.array(x.value.sum()), (x,),
                          lambda g: x.accumulate(np.broadcast_to(g, x.shape)))

    def weighted_sum(self, x: Var, weights) -> Var:
        """``sum(x * weights)`` with constant ``weights`` (used to mask padding)."""
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape:
            raise ShapeError(f"weighted_sum: weights {w.shape} vs input {x.shape}")
        return self._emit("weighted_sum", np.array((x.value * w).sum()), (x,),
                          lambda g: x.accumulate(g * w))

    # ------------------------------------------------------------ structure
    def concat(self, xs: Sequence[Var], axis: int = -1) -> Var:
        value = np.concatenate([x.value for x in xs], axis=axis)
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

        def back(g):
            for x, part in zip(xs, np.split(g, sizes, axis=axis)):
                x.accumulate(part)
        return self._emit("concat", value, xs, back)

    def slice_last(self, x: Var, start: int, stop: int) -> Var:
        def back(g):
            if x.requires_grad:
                full = np.zeros_like(x.value)
                full[..., start:stop] = g
                x.accumulate(full)
        return self._emit("slice", x.value[..., start:stop].copy(), (x,), back)

    def stack(self, xs: Sequence[Var], axis: int = -1) -> Var:
        value = np.stack([x.value for x in xs], axis=axis)

        def back(g):
            for i, x in enumerate(xs):
                x.accumulate(np.take(g, i, axis=axis))
        return self._emit("stack", value, xs, back)

    def embedding(self, table: Var, ids) -> Var:
        ids = np.asarray(ids, dtype=np.int64)
        if table.value.ndim != 2:
            raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

        def back(g):
            if table.requires_grad:
                full = np.zeros_like(table.value)
                np.add.at(full, ids, g)
                table.accumulate(full)
        return self._emit("embedding", table.value[ids], (table,), back)

    # ------------------------------------------------------------ layers
    def affine(self, x: Var, W: Var, b: Var) -> Var:
        if W.value.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
            raise ShapeError(f"affine: x {x.shape}, W {W.shape}, b {b.shape}")
        xv, Wv = x.value, W.value

        def back(g):
            x.accumulate(g @ Wv.T)
            if W.requires_grad:
                W.accumulate(np.outer(xv, g) if xv.ndim == 1 else xv.T @ g)
            b.accumulate(g if g.ndim == 1 else g.sum(axis=0))
        return self._emit("affine", xv @ Wv + b.value, (x, W, b), back)

    def gru_cell(self, h: Var, x: Var, theta: Sequence[Var]) -> Var:
        """One GRU step; ``theta = (Wz, bz, Wr, br, Wh, bh)``, each W of shape (in+hid, hid).

        z = sigmoid([x; h] Wz + bz), r = sigmoid([x; h] Wr + br),
        c = tanh([x; r*h] Wh + bh), h' = (1 - z) * h + z * c.
        """
        Wz, bz, Wr, br, Wh, bh = theta
        din, dh = x.shape[-1], h.shape[-1]
        for W, bias in ((Wz, bz), (Wr, br), (Wh, bh)):
            if W.shape != (din + dh, dh) or bias.shape != (dh,):
                raise ShapeError(f"gru_cell: weight {W.shape}/{bias.shape} for x {x.shape}, h {h.shape}")
        if x.shape[:-1] != h.shape[:-1]:
            raise ShapeError(f"gru_cell: batch mismatch x {x.shape} vs h {h.shape}")
        hv, xv = h.value, x.value
        xh = np.concatenate([xv, hv], axis=-1)
        z = _sigmoid(xh @ Wz.value + bz.value)
        r = _sigmoid(xh @ Wr.value + br.value)
        xrh = np.concatenate([xv, r * hv], axis=-1)
        c = np.tanh(xrh @ Wh.value + bh.value)
        out = (1.0 - z) * hv + z * c

        def outer(a, g):
            return np.outer(a, g) if a.ndim == 1 else a.T @ g

        def colsum(g):
            return g if g.ndim == 1 else g.sum(axis=0)

        def back(g):
            dz = g * (c - hv)
            dc = g * z
            dh = g * (1.0 - z)
            dpre_c = dc * (1.0 - c * c)
            Wh.accumulate(outer(xrh, dpre_c))
            bh.accumulate(colsum(dpre_c))
            dxrh = dpre_c @ Wh.value.T
            dx = dxrh[..., :din].copy()
            drh = dxrh[..., din:]
            dr = drh * hv
            dh = dh + drh * r
            dpre_z = dz * z * (1.0 - z)
            dpre_r = dr * r * (1.0 - r)
            Wz.accumulate(outer(xh, dpre_z))
            bz.accumulate(colsum(dpre_z))
            Wr.accumulate(outer(xh, dpre_r))
            br.accumulate(colsum(dpre_r))
            dxh = dpre_z @ Wz.value.T + dpre_r @ Wr.value.T
            x.accumulate(dx + dxh[..., :din])
            h.accumulate(dh + dxh[..., din:])
        return self._emit("gru_cell", out, (h, x, *theta), back)

    # ------------------------------------------------------------ probability
    def masked_log_softmax(self, logits: Var, allowed) -> Var:
        """Log-probabilities over the ``allowed`` ids of a 1-D logit vector.

        Output entry ``k`` is ``log p(allowed[k])``; every id outside
        ``allowed`` has probability exactly zero.
        """
        idx = np.asarray(allowed, dtype=np.int64)
        if logits.value.ndim != 1:
            raise ShapeError(f"masked_log_softmax: logits must be 1-D, got {logits.shape}")
        if idx.size == 0:
            raise ValueError("masked_log_softmax: allowed set is empty")
        if idx.min() < 0 or idx.max() >= logits.shape[0] or len(set(idx.tolist())) != idx.size:
            raise ValueError("masked_log_softmax: allowed ids must be distinct valid indices")
        sub = logits.value[idx]
        m = sub.max()
        lse = m + np.log(np.exp(sub - m).sum())
        out = sub - lse
        p = np.exp(out)

        def back(g):
            full = np.zeros_like(logits.value)
            full[idx] = g - p * g.sum()
            logits.accumulate(full)
        return self._emit("masked_log_softmax", out, (logits,), back)

    def select_log_prob(self, logits: Var, targets, mask: np.ndarray | None = None) -> Var:
        """Row-wise ``log softmax(logits)[target]`` restricted to ``mask``.

        ``logits`` is (B, V); ``mask`` is an optional (B, V) boolean support.
        Returns a (B,) vector.
        """
        L = logits.value
        if L.ndim != 2:
            raise ShapeError(f"select_log_prob: logits must be 2-D, got {logits.shape}")
        targets = np.asarray(targets, dtype=np.int64)
        rows = np.arange(L.shape[0])
        if mask is not None:
            if mask.shape != L.shape:
                raise ShapeError(f"select_log_prob: mask {mask.shape} vs logits {L.shape}")
            if not mask[rows, targets].all():
                bad = int(np.flatnonzero(~mask[rows, targets])[0])
                raise ValueError(f"select_log_prob: target {targets[bad]} outside the allowed set in row {bad}")
            Lm = np.where(mask, L, -np.inf)
        else:
            Lm = L
        m = Lm.max(axis=1, keepdims=True)
        e = np.exp(Lm - m)
        s = e.sum(axis=1, keepdims=True)
        p = e / s
        out = L[rows, targets] - (m[:, 0] + np.log(s[:, 0]))

        def back(g):
            d = -p * g[:, None]
            d[rows, targets] += g
            logits.accumulate(d)
        return self._emit("select_log_prob", out, (logits,), back)

    def gaussian_reparam(self, mu: Var, log_sigma: Var, noise) -> Var:
        eps = np.asarray(noise, dtype=np.float64)
        if not (mu.shape == log_sigma.shape == eps.shape):
            raise ShapeError(f"gaussian_reparam: mu {mu.shape}, log_sigma {log_sigma.shape}, noise {eps.shape}")
        sig = np.exp(log_sigma.value)

        def back(g):
            mu.accumulate(g)
            log_sigma.accumulate(g * sig * eps)
        return self._emit("gaussian_reparam", mu.value + sig * eps, (mu, log_sigma), back)

    def kl_std_normal(self, mu: Var, log_sigma: Var) -> Var:
        """KL(N(mu, sigma^2 I) || N(0, I)) summed over the last axis."""
        _check_same("kl_std_normal", mu, log_sigma)
        m, ls = mu.value, log_sigma.value
        s2 = np.exp(2.0 * ls)
        kl = 0.5 * (m * m + s2 - 2.0 * ls - 1.0).sum(axis=-1)

        def back(g):
            g = np.asarray(g)[..., None]
            mu.accumulate(g * m)
            log_sigma.accumulate(g * (s2 - 1.0))
        return self._emit("kl_std_normal", np.asarray(kl), (mu, log_sigma), back)


# ---------------------------------------------------------------------- params
class ParamStore:
    """Named float64 parameters with gradient and Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64, copy=True)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    def var(self, name: str, trainable: bool = True) -> Var:
        """Handle on a parameter; trainable handles accumulate into the store's gradient."""
        if trainable:
            return Var(self.params[name], requires_grad=True, grad=self.grads[name], name=name)
        return Var(self.params[name], name=name)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            factor = max_norm / norm
            for g in self.grads.values():
                g *= factor
        return norm

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self.params[name])
            out.m[name][...] = self.m[name]
            out.v[name][...] = self.v[name]
        out.step = self.step
        return out

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "params": {
                name: {"shape": list(self.params[name].shape), "data": self.params[name].ravel().tolist()}
                for name in self.names()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamStore":
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version {doc.get('version')!r}")
        store = cls()
        for name in sorted(doc["params"]):
            rec = doc["params"][name]
            arr = np.asarray(rec["data"], dtype=np.float64)
            shape = tuple(rec["shape"])
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"parameter {name!r}: {arr.size} values for shape {shape}")
            store.add(name, arr.reshape(shape))
        return store

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_dict(json.loads(Path(path).read_text()))


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip_norm: float | None = 5.0) -> None:
    """One bias-corrected Adam update over every parameter, then zero the gradients."""
    if clip_norm is not None:
        store.clip_grad_norm(clip_norm)
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


# ---------------------------------------------------------------------- init
def init_affine(store: ParamStore, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{prefix}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def init_gru(store: ParamStore, prefix: str, input_dim: int, hidden: int, rng: np.random.Generator):
    bound = 1.0 / np.sqrt(input_dim + hidden)
    for gate in ("z", "r", "h"):
        store.add(f"{prefix}.W{gate}", rng.uniform(-bound, bound, size=(input_dim + hidden, hidden)))
        store.add(f"{prefix}.b{gate}", np.zeros(hidden))


def init_embedding(store: ParamStore, name: str, vocab: int, dim: int, rng: np.random.Generator):
    store.add(name, rng.normal(0.0, 0.1, size=(vocab, dim)))


def gru_params(store: ParamStore, prefix: str, trainable: bool = True) -> tuple[Var, ...]:
    return tuple(store.var(f"{prefix}.{n}", trainable) for n in ("Wz", "bz", "Wr", "br", "Wh", "bh"))
