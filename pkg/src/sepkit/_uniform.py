"""Poisson-weighted power series (uniformization) shared by the evolution code.

For a generator ``Q = rate * (M - I)`` with ``M`` substochastic,
``exp(tQ) v = sum_k Pois(rate*t; k) M^k v``.  Long horizons are split into
chunks so the Poisson weights never underflow.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import stats

MAX_CHUNK = 32.0


def poisson_window(mu: float, tol: float) -> np.ndarray:
    """Poisson(mu) weights for k = 0..K with the upper tail beyond K below tol."""
    if mu <= 0.0:
        return np.ones(1)
    k = stats.poisson.isf(tol, mu)
    if np.isfinite(k):
        k = int(k)
    else:
        # isf gives nan for tails below ~1e-16; bound the tail through the pmf
        k = int(mu + 10.0 * math.sqrt(mu) + 10)
        while stats.poisson.pmf(k, mu) * (k + 1) / (k + 1 - mu) > tol:
            k = int(k * 1.25) + 1
    return stats.poisson.pmf(np.arange(k + 3), mu)


def uniformized(apply, v, mu: float, tol: float, max_chunk: float = MAX_CHUNK):
    """Return ``(sum_k Pois(mu;k) M^k v, dropped)`` where ``apply`` computes ``M @ x``.

    ``dropped`` is the total Poisson mass discarded by truncation.
    """
    v = np.array(v, dtype=float, copy=True)
    if mu <= 0.0:
        return v, 0.0
    n_chunks = max(1, math.ceil(mu / max_chunk))
    w = poisson_window(mu / n_chunks, tol / n_chunks)
    dropped = n_chunks * max(0.0, 1.0 - float(w.sum()))
    for _ in range(n_chunks):
        acc = w[0] * v
        cur = v
        for wk in w[1:]:
            cur = apply(cur)
            acc += wk * cur
        v = acc
    return v, dropped


def chunk_nodes(apply, v, rate: float, h: float, taus, tol: float):
    """Evaluate ``exp(s Q) v`` at every ``s`` in ``taus`` (all within ``[0, h]``).

    The powers ``M^k v`` are shared across nodes, so one sweep serves a whole
    quadrature rule.  Returns an array of shape ``(len(taus),) + v.shape``.
    """
    taus = np.asarray(taus, dtype=float)
    k_max = len(poisson_window(rate * h, tol)) - 1
    ks = np.arange(k_max + 1)
    weights = stats.poisson.pmf(ks[None, :], rate * taus[:, None])
    out = np.zeros((len(taus),) + np.shape(v))
    cur = np.array(v, dtype=float, copy=True)
    for k in range(k_max + 1):
        if k:
            cur = apply(cur)
        out += weights[:, k].reshape((-1,) + (1,) * cur.ndim) * cur
    return out
