"""Stirring Monte Carlo for exclusion on large truncations.

Forward runs use the stirring construction directly: edge clocks ring at
total rate ``R = sum_edges p(x, y)``, so over ``[0, t]`` there are
Poisson(``R t``) events, each picking an edge with probability
``p(x, y) / R`` from an alias table and swapping its two contents.

For window statistics started from a product law there is a much cheaper
exact route (``dynamics="dual"``): run the stirring backwards from the
window.  The set of sites the window reads from moves as an exclusion
process; a walker that meets a reservoir is frozen with a fresh
Bernoulli(``beta``) value, the others read Bernoulli(``alpha``) at time 0.

Every replica owns a numba RNG stream seeded from
``SeedSequence(master_seed, spawn_key=(replica,))``, so a sample set is a
pure function of the ExperimentSpec and the master seed whatever the worker count.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import kernels as kn
from .exactevolve import reservoir_densities

MONITOR_MARGIN = 5
MONITOR_PASS = 0.99
STATISTICS = ("window_sum", "w_plus", "config")
INITIAL_LAWS = ("product", "step", "explicit")


# --------------------------------------------------------------------------- numba cores


@numba.njit(cache=True)
def _alias_pick(prob, alias):
    u = np.random.random() * prob.shape[0]
    c = int(u)
    if c >= prob.shape[0]:
        c = prob.shape[0] - 1
    if u - c >= prob[c]:
        c = alias[c]
    return c


@numba.njit(cache=True)
def _stir(occ, ei, ej, prob, alias, rate, t, near):
    """Run stirring for time ``t`` in place; return True if a discordant swap touched ``near``."""
    hit = False
    if rate <= 0.0 or t <= 0.0:
        return hit
    n_events = np.random.poisson(rate * t)
    for _ in range(n_events):
        c = _alias_pick(prob, alias)
        a = ei[c]
        b = ej[c]
        if occ[a] != occ[b] and (near[a] or near[b]):
            hit = True
        tmp = occ[a]
        occ[a] = occ[b]
        occ[b] = tmp
    return hit


@numba.njit(cache=True)
def _forward_batch(seeds, init_kind, alpha, init_cfg, ei, ej, prob, alias, rate, t, near, stat_kind,
                   stat_mask, values, hits, conserved):
    n = alpha.shape[0]
    occ = np.empty(n, np.int8)
    for r in range(seeds.shape[0]):
        np.random.seed(seeds[r])
        if init_kind == 0:
            for x in range(n):
                occ[x] = 1 if np.random.random() < alpha[x] else 0
        else:
            for x in range(n):
                occ[x] = init_cfg[x]
        before = 0
        for x in range(n):
            before += occ[x]
        hits[r] = _stir(occ, ei, ej, prob, alias, rate, t, near)
        after = 0
        for x in range(n):
            after += occ[x]
        conserved[r] = before == after
        v = 0
        if stat_kind == 2:
            for x in range(n):
                if occ[x]:
                    v += 1 << x
        else:
            for x in range(n):
                if stat_mask[x] and occ[x]:
                    v += 1
        values[r] = v


@numba.njit(cache=True)
def _dual_batch(seeds, start, indptr, indices, cum, leak, beta, alpha, horizon, near, values, hits):
    """Backward exclusion walkers from ``start``; ``cum`` holds per-row cumulative jump probabilities."""
    n = alpha.shape[0]
    k = start.shape[0]
    occupied = np.zeros(n, np.bool_)
    pos = np.empty(k, np.int64)
    for r in range(seeds.shape[0]):
        np.random.seed(seeds[r])
        for i in range(k):
            pos[i] = start[i]
            occupied[start[i]] = True
        alive = k
        total = 0
        s = 0.0
        hit = False
        while alive > 0:
            s += np.random.exponential(1.0 / alive)
            if s > horizon:
                break
            i = int(np.random.random() * alive)
            if i >= alive:
                i = alive - 1
            x = pos[i]
            u = np.random.random()
            lo = indptr[x]
            hi = indptr[x + 1]
            moved = False
            for e in range(lo, hi):
                if u < cum[e]:
                    y = indices[e]
                    if not occupied[y]:
                        occupied[x] = False
                        occupied[y] = True
                        pos[i] = y
                        if near[y]:
                            hit = True
                    moved = True
                    break
            if moved:
                continue
            last = cum[hi - 1] if hi > lo else 0.0
            if u < last + leak[x]:
                # absorbed by the reservoir: frozen with a fresh Bernoulli(beta) value
                if np.random.random() < beta[x]:
                    total += 1
                occupied[x] = False
                alive -= 1
                pos[i] = pos[alive]
        for i in range(alive):
            if np.random.random() < alpha[pos[i]]:
                total += 1
            occupied[pos[i]] = False
        values[r] = total
        hits[r] = hit


# --------------------------------------------------------------------------- configurations


def sample_product(alpha, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(``alpha(x)``) occupancies as an ``int8`` array."""
    a = np.asarray(alpha, dtype=float)
    if ((a < 0) | (a > 1)).any():
        raise ValueError("alpha must lie in [0, 1]")
    return (rng.random(a.shape) < a).astype(np.int8)


def step_initial(kernel: kn.Kernel) -> np.ndarray:
    """Occupied exactly at coordinates ``<= 0`` (a line kernel is required)."""
    if kernel.kind != "line" or kernel.coord is None:
        raise ValueError("the step configuration needs a line kernel")
    return (kernel.coord <= 0).astype(np.int8)


def alias_table(weights) -> tuple[np.ndarray, np.ndarray]:
    """Vose alias table: pick column ``c`` uniformly, keep it with ``prob[c]``, else take ``alias[c]``."""
    w = np.asarray(weights, dtype=float)
    m = len(w)
    scaled = w * m / w.sum()
    prob = np.ones(m)
    alias = np.arange(m, dtype=np.int64)
    small = [i for i in range(m) if scaled[i] < 1.0]
    large = [i for i in range(m) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        (small if scaled[g] < 1.0 else large).append(g)
    return prob, alias


def _near_boundary(kernel: kn.Kernel, margin: int = MONITOR_MARGIN) -> np.ndarray:
    if kernel.kind == "line":
        return kernel.level >= kernel.params["radius"] - margin
    if kernel.kind == "tree":
        return kernel.level >= kernel.params["depth"] - margin
    return np.zeros(kernel.n, dtype=bool)


def _stirring_tables(kernel: kn.Kernel):
    pairs, rates = kernel.edges()
    prob, alias = alias_table(rates)
    return pairs[:, 0].copy(), pairs[:, 1].copy(), prob, alias, float(rates.sum())


def evolve_stirring(config, kernel: kn.Kernel, t: float, rng: np.random.Generator) -> np.ndarray:
    """Exact stirring dynamics for time ``t``; returns a new configuration."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    occ = np.array(config, dtype=np.int8)
    if occ.shape != (kernel.n,):
        raise ValueError("configuration length differs from the kernel size")
    ei, ej, prob, alias, rate = _stirring_tables(kernel)
    _seed_numba(int(rng.integers(2 ** 32)))
    _stir(occ, ei, ej, prob, alias, rate, float(t), _near_boundary(kernel))
    return occ


@numba.njit(cache=True)
def _seed_numba(s):
    np.random.seed(s)


def window_sum(config, window, kernel: kn.Kernel | None = None) -> int:
    """Occupied sites in ``window`` (a :class:`SiteWindow`, boolean mask or index list)."""
    occ = np.asarray(config)
    if isinstance(window, kn.SiteWindow):
        if kernel is None:
            raise ValueError("a SiteWindow needs the kernel")
        window = window.mask(kernel)
    window = np.asarray(window)
    if window.dtype == bool:
        return int(occ[window].sum())
    return int(occ[window.astype(int)].sum()) if window.size else 0


def w_plus(config, kernel: kn.Kernel) -> int:
    """Particles strictly right of the origin."""
    if kernel.coord is None:
        raise ValueError("w_plus needs a line kernel")
    return int(np.asarray(config)[kernel.coord > 0].sum())


# --------------------------------------------------------------------------- experiments


def build_kernel(spec: dict) -> kn.Kernel:
    """Kernel from ``{"kind": "tree", "depth": d}``, ``{"kind": "path", "sites": n}`` or
    ``{"kind": "line", "radius": M, "jump_law": {...}}``.

    ``"killed": true`` applies :func:`killed_truncation`.
    """
    kind = spec.get("kind")
    if kind == "tree":
        k = kn.build_binary_tree(int(spec["depth"]))
    elif kind == "path":
        k = kn.build_path(int(spec["sites"]), float(spec.get("rate", 0.5)))
    elif kind == "line":
        law = {int(s): float(p) for s, p in spec.get("jump_law", {"1": 0.5, "-1": 0.5}).items()}
        k = kn.build_line(int(spec["radius"]), law)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    return kn.killed_truncation(k) if spec.get("killed", False) else k


def line_radius(t: float, sigma: float = 1.0, factor: float = 10.0) -> int:
    """Default line truncation ``ceil(factor * sigma * sqrt(t))``."""
    return max(1, math.ceil(factor * sigma * math.sqrt(t)))


def resolve_alpha(kernel: kn.Kernel, alpha) -> np.ndarray:
    if isinstance(alpha, dict) and "tree_profile" in alpha:
        return kn.tree_alpha(*alpha["tree_profile"]).values(kernel)
    return kn.as_alpha(kernel, alpha)


def resolve_window(kernel: kn.Kernel, window) -> np.ndarray:
    if window is None:
        raise ValueError("window_sum needs a window")
    if "sites" in window:
        return kn.SiteWindow.explicit(window["sites"]).mask(kernel)
    sides = tuple(window["sides"]) if window.get("sides") else None
    return kn.SiteWindow(levels=tuple(window["levels"]), sides=sides).mask(kernel)


@dataclass
class ExperimentSpec:
    """Everything that determines a sample set, apart from the worker count."""

    kernel: dict
    t: float
    statistic: str = "window_sum"
    initial: str = "product"
    alpha: object = 0.5
    config: list | None = None
    window: dict | None = None
    replicas: int = 1000
    seed: int = 0
    dynamics: str = "forward"
    out: str | None = None

    def validate(self) -> None:
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.t < 0:
            raise ValueError("t must be nonnegative")
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if self.initial not in INITIAL_LAWS:
            raise ValueError(f"initial must be one of {INITIAL_LAWS}")
        if self.dynamics not in ("forward", "dual"):
            raise ValueError("dynamics must be 'forward' or 'dual'")
        if self.initial == "explicit" and self.config is None:
            raise ValueError("explicit initial law needs a config")
        if self.statistic == "window_sum" and self.window is None:
            raise ValueError("window_sum needs a window")
        if self.dynamics == "dual" and self.statistic == "config":
            raise ValueError("the dual sampler only produces counts")
        if self.dynamics == "dual" and self.initial == "explicit":
            raise ValueError("the dual sampler needs a product or step initial law")
        if not isinstance(self.kernel, dict) or "kind" not in self.kernel:
            raise ValueError("kernel spec must name a kind")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown spec fields {sorted(extra)}")
        return cls(**d)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def kernel_hash(kernel: kn.Kernel) -> str:
    p = kernel.p.tocsr()
    h = hashlib.sha256()
    for arr in (p.indptr, p.indices, p.data):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(kernel.kind.encode())
    return h.hexdigest()


def replica_seeds(master: int, start: int, stop: int) -> np.ndarray:
    return np.array([np.random.SeedSequence(master, spawn_key=(i,)).generate_state(1)[0]
                     for i in range(start, stop)], dtype=np.uint32)


@dataclass
class SampleSet:
    """One statistic value per replica plus everything needed to reproduce it."""

    spec: ExperimentSpec
    values: np.ndarray
    seeds: np.ndarray
    spec_hash: str
    kernel_hash: str
    monitor: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    def write(self, path) -> tuple[Path, Path]:
        """CSV ``replica,seed,statistic,value`` plus a ``.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replica", "seed", "statistic", "value"])
            for i, (s, v) in enumerate(zip(self.seeds, self.values)):
                w.writerow([i, int(s), self.spec.statistic, int(v)])
        side = path.with_suffix(path.suffix + ".json")
        side.write_text(json.dumps({
            "spec": self.spec.to_dict(),
            "master_seed": self.spec.seed,
            "spec_hash": self.spec_hash,
            "kernel_hash": self.kernel_hash,
            "truncation_monitor": self.monitor,
            "meta": self.meta,
        }, indent=2, default=str))
        return path, side

    @classmethod
    def read(cls, path) -> "SampleSet":
        path = Path(path)
        side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        return cls(ExperimentSpec.from_dict(side["spec"]),
                   np.array([int(r["value"]) for r in rows], dtype=np.int64),
                   np.array([int(r["seed"]) for r in rows], dtype=np.uint32),
                   side["spec_hash"], side["kernel_hash"], side["truncation_monitor"], side.get("meta", {}))


def _prepare(spec: ExperimentSpec):
    kernel = build_kernel(spec.kernel)
    if spec.statistic == "config" and kernel.n > 62:
        raise ValueError("config statistic is limited to 62 sites")
    if spec.initial == "step":
        a = step_initial(kernel).astype(float)
    elif spec.initial == "product":
        a = resolve_alpha(kernel, spec.alpha)
    else:
        a = np.zeros(kernel.n)
    cfg = np.zeros(kernel.n, np.int8)
    if spec.initial == "explicit":
        cfg = np.asarray(spec.config, dtype=np.int8)
        if cfg.shape != (kernel.n,):
            raise ValueError("explicit config length differs from the kernel size")
    if spec.statistic == "w_plus":
        mask = kernel.coord > 0 if kernel.coord is not None else None
        if mask is None:
            raise ValueError("w_plus needs a line kernel")
    elif spec.statistic == "window_sum":
        mask = resolve_window(kernel, spec.window)
    else:
        mask = np.zeros(kernel.n, dtype=bool)
    return kernel, a, cfg, mask


def _run_block(spec_dict: dict, start: int, stop: int):
    spec = ExperimentSpec.from_dict(spec_dict)
    kernel, a, cfg, mask = _prepare(spec)
    seeds = replica_seeds(spec.seed, start, stop)
    values = np.zeros(stop - start, np.int64)
    hits = np.zeros(stop - start, np.bool_)
    near = _near_boundary(kernel)
    if spec.dynamics == "forward":
        ei, ej, prob, alias, rate = _stirring_tables(kernel)
        conserved = np.zeros(stop - start, np.bool_)
        _forward_batch(seeds, 0 if spec.initial != "explicit" else 1, a, cfg, ei, ej, prob, alias, rate,
                       float(spec.t), near, STATISTICS.index(spec.statistic) if spec.statistic == "config" else 0,
                       mask, values, hits, conserved)
        if not conserved.all():
            raise RuntimeError("particle number changed along a stirring trajectory")
    else:
        if kernel.killed:
            q, beta = reservoir_densities(kernel, a)
        else:
            q, beta = np.zeros(kernel.n), np.zeros(kernel.n)
        p = kernel.p.tocsr().copy()
        p.setdiag(0.0)
        p.eliminate_zeros()
        p.sort_indices()
        cum = np.zeros_like(p.data)
        for x in range(kernel.n):
            lo, hi = p.indptr[x], p.indptr[x + 1]
            cum[lo:hi] = np.cumsum(p.data[lo:hi])
        start_sites = np.flatnonzero(mask).astype(np.int64)
        _dual_batch(seeds, start_sites, p.indptr.astype(np.int64), p.indices.astype(np.int64), cum, q, beta, a,
                    float(spec.t), near, values, hits)
    return values, seeds, hits


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> SampleSet:
    """Run ``spec.replicas`` independent replicas; identical output for any ``jobs``."""
    spec.validate()
    kernel, *_ = _prepare(spec)
    t0 = time.perf_counter()
    n = spec.replicas
    if jobs <= 1 or n < 2 * jobs:
        blocks = [_run_block(spec.to_dict(), 0, n)]
    else:
        edges = np.linspace(0, n, jobs + 1).astype(int)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_block, spec.to_dict(), int(a), int(b)) for a, b in zip(edges, edges[1:])]
            blocks = [f.result() for f in futures]
    values = np.concatenate([b[0] for b in blocks])
    seeds = np.concatenate([b[1] for b in blocks])
    hits = np.concatenate([b[2] for b in blocks])
    clean = float(1.0 - hits.mean())
    monitor = {"margin": MONITOR_MARGIN, "clean_fraction": clean, "pass": clean >= MONITOR_PASS,
               "boundary_events": int(hits.sum())}
    meta = {"wall_seconds": time.perf_counter() - t0, "jobs": jobs, "sites": kernel.n}
    out = SampleSet(spec, values, seeds, spec.digest(), kernel_hash(kernel), monitor, meta)
    if spec.out:
        out.write(spec.out)
    return out


def empirical_distribution(samples: SampleSet | np.ndarray, n_sites: int) -> np.ndarray:
    """Frequencies of ``config`` samples as a weight vector over ``2^n_sites`` configurations."""
    vals = samples.values if isinstance(samples, SampleSet) else np.asarray(samples)
    return np.bincount(vals, minlength=2 ** n_sites) / len(vals)
