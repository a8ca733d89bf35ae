"""Master-equation evolution of the full occupancy distribution.

The weight vector of a :class:`~sepkit.genpoly.SubsetDistribution` is viewed
as an ``n``-dimensional ``2 x 2 x ... x 2`` array (bit ``k`` is axis
``n-1-k``), so swapping two sites is an axis transpose and no index tables
are needed even at ``n = 20``.

Killed kernels get reservoirs: a site that leaks mass ``q_x`` resamples its
occupation from Bernoulli(``beta_x``) at rate ``q_x``.  This is the open
finite system whose stationary one-point function is a given harmonic
profile; see :func:`reservoir_densities`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import genpoly
from ._uniform import MAX_CHUNK, uniformized
from .kernels import Kernel, as_alpha


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ExclusionGenerator:
    """Edge list of the exclusion dynamics, plus optional boundary reservoirs."""

    n: int
    edges: np.ndarray          # (m, 2) int, i < j, lexicographic
    rates: np.ndarray          # (m,)
    reservoir_rates: np.ndarray = None   # (n,) or None
    reservoir_density: np.ndarray = None  # (n,) or None

    def __post_init__(self):
        if (self.rates < 0).any():
            raise ValueError("negative rate")
        if self.reservoir_rates is None:
            object.__setattr__(self, "reservoir_rates", np.zeros(self.n))
            object.__setattr__(self, "reservoir_density", np.zeros(self.n))

    @property
    def open(self) -> bool:
        return bool((self.reservoir_rates > 0).any())

    @property
    def total_rate(self) -> float:
        return float(self.rates.sum() + self.reservoir_rates.sum())

    def outflow(self, mask: int) -> float:
        """Total jump rate out of configuration ``mask`` (edges with discordant occupancy)."""
        occ = (mask >> self.edges) & 1
        disc = occ[:, 0] != occ[:, 1]
        out = float(self.rates[disc].sum())
        bits = (mask >> np.arange(self.n)) & 1
        flip = np.where(bits == 1, 1 - self.reservoir_density, self.reservoir_density)
        return out + float((self.reservoir_rates * flip).sum())

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "edges": [[int(i), int(j), float(r)] for (i, j), r in zip(self.edges, self.rates)],
            "reservoir_rates": self.reservoir_rates.tolist(),
            "reservoir_density": self.reservoir_density.tolist(),
        }


def reservoir_densities(kernel: Kernel, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Reservoir rates and densities making ``alpha`` the stationary density.

    Balance at a leaking site ``x`` reads
    ``sum_y p(x,y)(alpha(y) - alpha(x)) + q_x (beta_x - alpha(x)) = 0``.
    Non-leaking sites need ``alpha`` harmonic there.
    """
    a = as_alpha(kernel, alpha)
    q = np.clip(kernel.leak, 0.0, None)
    flux = kernel.p @ a - kernel.row_sums * a
    beta = np.zeros(kernel.n)
    leaking = q > 1e-15
    beta[leaking] = a[leaking] - flux[leaking] / q[leaking]
    if (np.abs(flux[~leaking]) > 1e-10).any():
        raise ValueError("alpha is not harmonic at a non-leaking site")
    if ((beta < -1e-12) | (beta > 1 + 1e-12)).any():
        raise ValueError("reservoir densities leave [0, 1]; alpha is not realizable by reservoirs")
    q[~leaking] = 0.0
    return q, np.clip(beta, 0.0, 1.0)


def build_generator(kernel: Kernel, alpha=None, cap: int = genpoly.DEFAULT_CAP) -> ExclusionGenerator:
    """One edge per unordered pair with ``p(x,y) > 0``; holding mass is ignored.

    For a killed kernel, ``alpha`` (harmonic away from the leaking sites)
    fixes the reservoir densities.
    """
    if kernel.n > cap:
        raise ValueError(f"{kernel.n} sites exceeds the cap of {cap}")
    pairs, rates = kernel.edges()
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if kernel.killed and (kernel.leak > 1e-15).any():
        if alpha is None:
            raise ValueError("a killed kernel needs alpha to set the reservoir densities")
        q, beta = reservoir_densities(kernel, alpha)
        return ExclusionGenerator(kernel.n, pairs, np.asarray(rates, float), q, beta)
    return ExclusionGenerator(kernel.n, pairs, np.asarray(rates, float))


# --------------------------------------------------------------------------- operators


def _axis(n: int, site: int) -> int:
    return n - 1 - site


def swap_sites(w: np.ndarray, n: int, i: int, j: int) -> np.ndarray:
    t = w.reshape((2,) * n)
    return np.ascontiguousarray(np.swapaxes(t, _axis(n, i), _axis(n, j))).reshape(-1)


def resample_site(w: np.ndarray, n: int, x: int, beta: float) -> np.ndarray:
    t = w.reshape((2,) * n)
    ax = _axis(n, x)
    tot = t.sum(axis=ax, keepdims=True)
    shape = [1] * n
    shape[ax] = 2
    return (tot * np.array([1.0 - beta, beta]).reshape(shape)).reshape(-1)


def uniformized_step(gen: ExclusionGenerator):
    """``M`` with ``L = Lambda (M - I)``; ``M`` is a convex combination of swaps and resamples."""
    lam = gen.total_rate
    n = gen.n
    res = [(x, q / lam, gen.reservoir_density[x]) for x, q in enumerate(gen.reservoir_rates) if q > 0]

    def apply(w):
        out = np.zeros_like(w)
        for (i, j), r in zip(gen.edges, gen.rates):
            out += (r / lam) * swap_sites(w, n, int(i), int(j))
        for x, wt, beta in res:
            out += wt * resample_site(w, n, x, beta)
        return out

    return apply


def apply_generator(gen: ExclusionGenerator, w: np.ndarray) -> np.ndarray:
    lam = gen.total_rate
    return lam * (uniformized_step(gen)(w) - w)


# --------------------------------------------------------------------------- evolution


def tv_distance(a, b) -> float:
    a = a.weights if isinstance(a, genpoly.SubsetDistribution) else np.asarray(a)
    b = b.weights if isinstance(b, genpoly.SubsetDistribution) else np.asarray(b)
    return 0.5 * float(np.abs(a - b).sum())


def occupation_probabilities(dist: genpoly.SubsetDistribution) -> np.ndarray:
    t = dist.weights.reshape((2,) * dist.n)
    return np.array([t.sum(axis=tuple(a for a in range(dist.n) if a != _axis(dist.n, x)))[1]
                     for x in range(dist.n)])


def _trace_line(step, t, prev, cur, n_points=20, seed=0) -> dict:
    d = genpoly.SubsetDistribution(cur.size.bit_length() - 1, cur / cur.sum())
    ray = genpoly.rayleigh_check(d, n_points=n_points, seed=seed) if d.n >= 2 else None
    root = genpoly.real_rooted(genpoly.diagonalize(d))
    return {
        "step": step,
        "t": t,
        "tv_change": 0.5 * float(np.abs(cur - prev).sum()),
        "rayleigh_min": None if ray is None else ray.worst,
        "realroot_margin": root.margin,
    }


def evolve(dist: genpoly.SubsetDistribution, gen: ExclusionGenerator, t: float, tol: float = 1e-12,
           trace=None, max_chunk: float = MAX_CHUNK) -> genpoly.SubsetDistribution:
    """``exp(tL)`` applied to ``dist`` by uniformization.

    The horizon is cut into chunks with ``Lambda * dt <= max_chunk``; ``trace``
    (a writable text stream) receives one JSON line per chunk.  The result is
    renormalized and ``info`` records the renormalization delta and the
    dropped Poisson mass.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if dist.n != gen.n:
        raise ValueError("distribution and generator disagree on the site count")
    lam = gen.total_rate
    w = dist.weights.copy()
    if t == 0 or lam == 0:
        return genpoly.SubsetDistribution(dist.n, w, {"t": t, "renorm_delta": 0.0, "dropped": 0.0})
    apply = uniformized_step(gen)
    n_chunks = max(1, math.ceil(lam * t / max_chunk))
    dt = t / n_chunks
    dropped = 0.0
    min_weight = 0.0
    for k in range(n_chunks):
        prev = w
        w, d = uniformized(apply, w, lam * dt, tol / n_chunks, max_chunk=math.inf)
        dropped += d
        min_weight = min(min_weight, float(w.min()))
        if trace is not None:
            trace.write(json.dumps(_trace_line(k + 1, (k + 1) * dt, prev, w)) + "\n")
    total = float(w.sum())
    w = w / total
    info = {"t": t, "renorm_delta": total - 1.0, "dropped": dropped, "chunks": n_chunks,
            "min_weight_before_renorm": min_weight}
    return genpoly.SubsetDistribution(dist.n, w, info)


def evolve_stirring_products(dist: genpoly.SubsetDistribution, gen: ExclusionGenerator, t: float,
                             steps: int) -> genpoly.SubsetDistribution:
    """Trotter splitting into single-edge mixing operators.

    Each step of length ``dt = t/steps`` applies, for every edge in
    lexicographic order, ``transposition_mix`` with no-swap probability
    ``(1 + exp(-2 r dt))/2`` (the parity of a rate-``r`` Poisson clock), then
    each reservoir resample with probability ``1 - exp(-q dt)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = t / steps
    w = dist
    order = [(int(i), int(j)) for i, j in gen.edges]
    for _ in range(steps):
        for (i, j), r in zip(order, gen.rates):
            w = genpoly.transposition_mix(w, i, j, 0.5 * (1.0 + math.exp(-2.0 * r * dt)))
        for x, q in enumerate(gen.reservoir_rates):
            if q > 0:
                keep = math.exp(-q * dt)
                mixed = keep * w.weights + (1 - keep) * resample_site(w.weights, w.n, x,
                                                                       gen.reservoir_density[x])
                w = genpoly.SubsetDistribution(w.n, mixed)
    return genpoly.SubsetDistribution(w.n, w.weights, {"t": t, "steps": steps, "edge_order": order})


def stationary_limit(dist: genpoly.SubsetDistribution, gen: ExclusionGenerator, tol: float = 1e-10,
                     t0: float = 1.0, max_doublings: int = 40) -> genpoly.SubsetDistribution:
    """Evolve with a doubling horizon until successive total-variation change < ``tol``.

    Without reservoirs the limit is uniform within each particle-count
    sector (weighted by the initial sector masses).
    """
    cur = evolve(dist, gen, t0, tol=tol * 1e-2)
    horizon = t0
    for _ in range(max_doublings):
        nxt = evolve(cur, gen, horizon, tol=tol * 1e-2)
        change = tv_distance(cur, nxt)
        horizon *= 2
        cur = nxt
        if change < tol:
            return genpoly.SubsetDistribution(cur.n, cur.weights,
                                              {"horizon": horizon, "tv_change": change})
    raise ConvergenceError(f"no convergence by t={horizon} (last change {change:.3g})")


def sector_average(dist: genpoly.SubsetDistribution) -> genpoly.SubsetDistribution:
    """Spread each particle-count sector's mass uniformly over its configurations."""
    counts = genpoly.popcount(dist.n)
    mass = np.bincount(counts, weights=dist.weights, minlength=dist.n + 1)
    sizes = np.bincount(counts, minlength=dist.n + 1)
    return genpoly.SubsetDistribution(dist.n, mass[counts] / sizes[counts])
