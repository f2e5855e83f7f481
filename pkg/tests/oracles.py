"""Independent reference computations used by the tests.

Everything here is written as plain loops over scalars so that it shares no
code path with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest coordinate error, relative to the larger gradient magnitude (floored)."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-6)
    return float(np.abs(a - b).max() / scale)


def loop_mlp(dims, flat, x):
    """Scalar-loop forward pass of a tanh MLP with (in, out)-stored weights then biases."""
    pos = 0
    h = [float(v) for v in x]
    n_layers = len(dims) - 1
    for layer in range(n_layers):
        n_in, n_out = dims[layer], dims[layer + 1]
        w = [[flat[pos + i * n_out + j] for j in range(n_out)] for i in range(n_in)]
        pos += n_in * n_out
        b = [flat[pos + j] for j in range(n_out)]
        pos += n_out
        out = []
        for j in range(n_out):
            s = b[j]
            for i in range(n_in):
                s += h[i] * w[i][j]
            out.append(math.tanh(s) if layer < n_layers - 1 else s)
        h = out
    return h


def adam_reference(params, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam with bias correction, applied coordinate by coordinate."""
    p = [float(v) for v in params]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads_seq, 1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] -= lr * mh / (math.sqrt(vh) + eps)
    return p


def gae_double_loop(rewards, values, next_values, terminal, episode_end, gamma, lam):
    """Direct sum A_t = sum_l (gamma*lam)^l delta_{t+l}, stopping at episode ends."""
    n = len(rewards)
    deltas = []
    for t in range(n):
        boot = 0.0 if terminal[t] else next_values[t]
        deltas.append(rewards[t] + gamma * boot - values[t])
    adv = []
    for t in range(n):
        total, coef = 0.0, 1.0
        for k in range(t, n):
            total += coef * deltas[k]
            if episode_end[k]:
                break
            coef *= gamma * lam
        adv.append(total)
    return adv


def kl(p, q) -> float:
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def tv(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
