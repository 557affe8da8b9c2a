"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from causaltad.diff_core import Tape, Var, const

STEP = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(f, arrays, k):
    """d f / d arrays[k] by central differences; ``f`` maps a list of arrays to a float."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[k])
    it = np.nditer(base[k], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = base[k][idx]
        base[k][idx] = orig + STEP
        up = f(base)
        base[k][idx] = orig - STEP
        down = f(base)
        base[k][idx] = orig
        g[idx] = (up - down) / (2 * STEP)
    return g


def check_op(build, arrays, rng, wrt=None) -> float:
    """Worst relative error of ``build``'s gradients against finite differences.

    ``build(tape, vars)`` returns an output Var; it is contracted with fixed
    random weights to form a scalar loss.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    vars_ = [Var(np.array(a, dtype=np.float64), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    tape = Tape()
    out = build(tape, vars_)
    w = rng.standard_normal(out.shape)
    tape.backward(tape.weighted_sum(out, w))

    def f(arrs):
        return float((build(Tape(), [const(a) for a in arrs]).value * w).sum())

    worst = 0.0
    for k in wrt:
        num = numeric_grad(f, [np.array(a, dtype=np.float64) for a in arrays], k)
        ana = vars_[k].grad if vars_[k].grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(ana, num))
    return worst
