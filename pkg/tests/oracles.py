"""Independent reference computations used by the test-suite.

Nothing here shares code with the package paths it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def monotonic_paths(T: int, N: int):
    """Every path n_0=0 .. n_{T-1}=N-1 with steps of 0 or +1, by choosing where the N-1 advances happen."""
    for moves in itertools.combinations(range(1, T), N - 1):
        path, n = [], 0
        move_at = set(moves)
        for t in range(T):
            if t in move_at:
                n += 1
            path.append(n)
        yield path


def path_scores(m: np.ndarray) -> np.ndarray:
    T, N = m.shape
    return np.array([sum(m[t, n] for t, n in enumerate(p)) for p in monotonic_paths(T, N)])


def brute_forward_sum(m: np.ndarray) -> float:
    s = path_scores(m)
    top = s.max()
    return -(top + math.log(np.exp(s - top).sum()))


def brute_viterbi(m: np.ndarray):
    paths = list(monotonic_paths(*m.shape))
    scores = [sum(m[t, n] for t, n in enumerate(p)) for p in paths]
    i = int(np.argmax(scores))
    return paths[i], scores[i]


def beta_binomial_pmf(k: int, n: int, a: float, b: float) -> float:
    """Direct evaluation with math.comb and math.lgamma."""
    lbeta = lambda x, y: math.lgamma(x) + math.lgamma(y) - math.lgamma(x + y)
    return math.comb(n, k) * math.exp(lbeta(k + a, n - k + b) - lbeta(a, b))


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar f at x (float64), entry by entry."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def param_central_difference(loss_fn, tensor, indices, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. selected flat entries of a float64 torch tensor."""
    import torch

    out = np.zeros(len(indices))
    with torch.no_grad():
        flat = tensor.view(-1)
        for j, i in enumerate(indices):
            old = float(flat[i])
            flat[i] = old + h
            fp = float(loss_fn())
            flat[i] = old - h
            fm = float(loss_fn())
            flat[i] = old
            out[j] = (fp - fm) / (2 * h)
    return out
