"""Finite symmetric transition kernels and single-walk quantities.

Two constructors are provided: two rooted binary trees joined by a basis
edge (every vertex has three neighbours, jump probability 1/3 each) and the
integer line ``-radius..radius`` with a symmetric jump law.  Truncation keeps
the kernel stochastic by parking the missing mass on the diagonal; Green
functions need a transient walk and use :func:`killed_truncation` instead.

Site ordering is deterministic: the tree is listed breadth-first from the
left basis endpoint, the line by coordinate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse import csgraph

from ._uniform import uniformized

LEFT, RIGHT = 0, 1
SIDE_NAMES = ("L", "R")
ROW_TOL = 1e-12
DIRECT_SOLVE_MAX = 20_000


class RecurrentKernelError(ValueError):
    """Raised when a Green function is requested for a conservative kernel."""


@dataclass(frozen=True, eq=False)
class Kernel:
    """Symmetric transition matrix plus per-site metadata.

    ``level`` is the distance to the nearer basis endpoint (tree) or ``|x|``
    (line); ``side`` is 0/1 for L/R on the tree; ``coord`` is the integer
    position on the line.  ``params`` records how the kernel was built,
    including ``bulk_holding``: the diagonal mass an untruncated site carries.
    """

    p: sp.csr_matrix
    kind: str
    level: np.ndarray
    side: np.ndarray | None = None
    coord: np.ndarray | None = None
    slot: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    killed = False

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def diag(self) -> np.ndarray:
        return self.p.diagonal()

    @property
    def row_sums(self) -> np.ndarray:
        return np.asarray(self.p.sum(axis=1)).ravel()

    @property
    def offdiag_mass(self) -> np.ndarray:
        return self.row_sums - self.diag

    @property
    def leak(self) -> np.ndarray:
        """Per-site mass lost at the truncation (zero for stochastic kernels)."""
        return np.clip(1.0 - self.row_sums, 0.0, None)

    def boundary_mask(self) -> np.ndarray:
        bulk = self.params.get("bulk_holding", 0.0)
        if self.killed:
            return self.row_sums < 1.0 - ROW_TOL
        return self.diag > bulk + ROW_TOL

    def adjacency(self) -> sp.csr_matrix:
        if "adj" not in self._cache:
            a = (self.p - sp.diags(self.diag)).tocsr()
            a.eliminate_zeros()
            a.data[:] = 1.0
            self._cache["adj"] = a
        return self._cache["adj"]

    def interior_mask(self, margin: int = 0) -> np.ndarray:
        """Sites at graph distance >= ``margin`` from the boundary layer.

        ``margin=0`` returns every site; ``margin=1`` the full-degree sites.
        """
        if margin <= 0:
            return np.ones(self.n, dtype=bool)
        near = self.boundary_mask().astype(float)
        adj = self.adjacency()
        for _ in range(margin - 1):
            near = np.minimum(1.0, near + adj @ near)
        return near == 0

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unordered off-diagonal support as ``(pairs[m, 2], rates[m])`` sorted lexicographically."""
        if "edges" not in self._cache:
            up = sp.triu(self.p, k=1).tocoo()
            order = np.lexsort((up.col, up.row))
            pairs = np.stack([up.row[order], up.col[order]], axis=1).astype(np.int64)
            keep = up.data[order] > 0
            self._cache["edges"] = (pairs[keep], up.data[order][keep].copy())
        return self._cache["edges"]

    def distance_row(self, x: int) -> np.ndarray:
        key = ("dist", int(x))
        if key not in self._cache:
            d = csgraph.shortest_path(self.adjacency(), unweighted=True, indices=int(x))
            self._cache[key] = d
        return self._cache[key]

    def distance(self, x: int, y: int) -> int:
        return int(self.distance_row(x)[y])

    def site(self, side: str | None = None, level: int | None = None, slot: int = 0,
             coord: int | None = None) -> int:
        """Index of a site by metadata: ``site("L", 3, slot=5)`` or ``site(coord=-2)``."""
        if coord is not None:
            hits = np.flatnonzero(self.coord == coord)
        else:
            s = SIDE_NAMES.index(side)
            hits = np.flatnonzero((self.side == s) & (self.level == level) & (self.slot == slot))
        if len(hits) != 1:
            raise KeyError(f"no unique site for side={side} level={level} slot={slot} coord={coord}")
        return int(hits[0])

    def to_json(self) -> dict:
        sites = []
        for i in range(self.n):
            rec = {"id": i, "level": int(self.level[i])}
            rec["side"] = SIDE_NAMES[self.side[i]] if self.side is not None else None
            rec["coord"] = int(self.coord[i]) if self.coord is not None else None
            if self.slot is not None:
                rec["slot"] = int(self.slot[i])
            sites.append(rec)
        pairs, rates = self.edges()
        return {
            "kind": self.kind,
            "killed": self.killed,
            "params": self.params,
            "sites": sites,
            "edges": [[int(i), int(j), float(r)] for (i, j), r in zip(pairs, rates)],
            "holding": [float(h) for h in self.diag],
        }


class KilledKernel(Kernel):
    """Substochastic kernel: the walker dies where the truncation cut mass off."""

    killed = True


def kernel_from_json(obj: Mapping) -> Kernel:
    sites = obj["sites"]
    n = len(sites)
    rows, cols, vals = [], [], []
    for i, j, r in obj["edges"]:
        rows += [i, j]
        cols += [j, i]
        vals += [r, r]
    rows += list(range(n))
    cols += list(range(n))
    vals += list(obj["holding"])
    p = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    level = np.array([s["level"] for s in sites], dtype=np.int64)
    side = coord = slot = None
    if sites and sites[0].get("side") is not None:
        side = np.array([SIDE_NAMES.index(s["side"]) for s in sites], dtype=np.int8)
    if sites and sites[0].get("coord") is not None:
        coord = np.array([s["coord"] for s in sites], dtype=np.int64)
    if sites and "slot" in sites[0]:
        slot = np.array([s["slot"] for s in sites], dtype=np.int64)
    cls = KilledKernel if obj.get("killed") else Kernel
    return cls(p=p, kind=obj["kind"], level=level, side=side, coord=coord, slot=slot,
               params=dict(obj.get("params", {})))


def save_kernel(kernel: Kernel, path) -> None:
    with open(path, "w") as fh:
        json.dump(kernel.to_json(), fh)


def load_kernel(path) -> Kernel:
    with open(path) as fh:
        return kernel_from_json(json.load(fh))


# --------------------------------------------------------------------------- constructors


def _tree_layout(depth: int):
    blocks = [(LEFT, 0)]
    for d in range(1, depth + 2):
        blocks.append((RIGHT, d - 1))
        if d <= depth:
            blocks.append((LEFT, d))
    offset, pos = {}, 0
    for s, l in blocks:
        offset[(s, l)] = pos
        pos += 2 ** l
    return blocks, offset, pos


def build_binary_tree(depth: int) -> Kernel:
    """Binary tree with a basis edge, truncated at ``depth`` levels on each side.

    Interior vertices jump to each of their three neighbours with probability
    1/3; the missing children of level-``depth`` vertices become holding mass.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    blocks, offset, n = _tree_layout(depth)
    level = np.empty(n, dtype=np.int64)
    side = np.empty(n, dtype=np.int8)
    slot = np.empty(n, dtype=np.int64)
    for s, l in blocks:
        o = offset[(s, l)]
        level[o:o + 2 ** l] = l
        side[o:o + 2 ** l] = s
        slot[o:o + 2 ** l] = np.arange(2 ** l)

    rows = [np.array([offset[(LEFT, 0)]])]
    cols = [np.array([offset[(RIGHT, 0)]])]
    for s in (LEFT, RIGHT):
        for l in range(depth):
            j = np.arange(2 ** l)
            parent = offset[(s, l)] + j
            for c in (0, 1):
                rows.append(parent)
                cols.append(offset[(s, l + 1)] + 2 * j + c)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    third = np.full(len(r), 1.0 / 3.0)
    hold = np.where(level == depth, 2.0 / 3.0, 0.0)
    p = sp.coo_matrix((np.concatenate([third, third, hold]),
                       (np.concatenate([r, c, np.arange(n)]), np.concatenate([c, r, np.arange(n)]))),
                      shape=(n, n)).tocsr()
    p.eliminate_zeros()
    return Kernel(p=p, kind="tree", level=level, side=side, slot=slot,
                  params={"depth": depth, "bulk_holding": 0.0})


def build_line(radius: int, jump_law: Mapping[int, float]) -> Kernel:
    """Integer line ``-radius..radius`` with ``p(x, y) = jump_law[y - x]``.

    Jumps leaving the segment become holding at the departure site.  A law
    summing to less than one is treated as a truncated infinite-support law:
    the deficit is renormalized into holding and reported as ``tail_mass``.
    """
    if radius < 1:
        raise ValueError("radius must be positive")
    law = {int(k): float(v) for k, v in jump_law.items() if v != 0.0}
    for k, v in law.items():
        if v < 0:
            raise ValueError(f"negative jump probability at step {k}")
        if abs(law.get(-k, 0.0) - v) > ROW_TOL:
            raise ValueError(f"jump law is not symmetric at step {k}")
    total = sum(law.values())
    if total > 1.0 + ROW_TOL:
        raise ValueError(f"jump law sums to {total} > 1")
    tail = max(0.0, 1.0 - total)
    bulk_holding = law.get(0, 0.0) + tail

    n = 2 * radius + 1
    coord = np.arange(-radius, radius + 1)
    rows, cols, vals = [], [], []
    hold = np.full(n, bulk_holding)
    for step, prob in law.items():
        if step == 0:
            continue
        src = np.arange(n)
        dst = src + step
        inside = (dst >= 0) & (dst < n)
        rows.append(src[inside])
        cols.append(dst[inside])
        vals.append(np.full(inside.sum(), prob))
        hold[~inside] += prob
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(hold)
    p = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    p.eliminate_zeros()
    sigma2 = sum(k * k * v for k, v in law.items())
    return Kernel(p=p, kind="line", level=np.abs(coord), coord=coord,
                  params={"radius": radius, "jump_law": {str(k): v for k, v in sorted(law.items())},
                          "tail_mass": tail, "bulk_holding": bulk_holding, "sigma2": sigma2})


def build_path(n: int, rate: float = 0.5) -> Kernel:
    """Path on sites ``0..n-1``, neighbours joined at ``rate``; missing neighbours become holding."""
    if n < 2:
        raise ValueError("a path needs at least two sites")
    if not 0.0 < rate <= 0.5:
        raise ValueError("rate must lie in (0, 1/2]")
    off = np.full(n - 1, rate)
    hold = np.full(n, 1.0 - 2 * rate)
    hold[[0, -1]] += rate
    p = sp.diags([off, hold, off], [-1, 0, 1], format="csr")
    coord = np.arange(n)
    return Kernel(p=p, kind="path", level=coord.copy(), coord=coord,
                  params={"sites": n, "rate": rate, "bulk_holding": 1.0 - 2 * rate})


def killed_truncation(kernel: Kernel) -> KilledKernel:
    """Remove boundary holding so the walker dies at the truncation edge."""
    bulk = kernel.params.get("bulk_holding", 0.0)
    p = (kernel.p - sp.diags(kernel.diag - np.minimum(kernel.diag, bulk))).tocsr()
    p.eliminate_zeros()
    return KilledKernel(p=p, kind=kernel.kind, level=kernel.level, side=kernel.side,
                        coord=kernel.coord, slot=kernel.slot, params=dict(kernel.params))


def tree_distance(kernel: Kernel, x: int, y: int) -> int:
    """Closed-form graph distance on a tree kernel from (side, level, slot)."""
    lx, ly = int(kernel.level[x]), int(kernel.level[y])
    if kernel.side[x] != kernel.side[y]:
        return lx + ly + 1
    jx, jy = int(kernel.slot[x]), int(kernel.slot[y])
    d = 0
    while lx > ly:
        jx >>= 1
        lx -= 1
        d += 1
    while ly > lx:
        jy >>= 1
        ly -= 1
        d += 1
    while jx != jy:
        jx >>= 1
        jy >>= 1
        d += 2
    return d


# --------------------------------------------------------------------------- semigroup


def heat_apply(kernel: Kernel, v, t: float, tol: float = 1e-12):
    """``p_t v`` for the rate-one continuous-time walk (``v`` may be a matrix)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    p = kernel.p
    out, _ = uniformized(lambda x: p @ x, np.asarray(v, dtype=float), t, tol)
    return out


def heat_kernel(kernel: Kernel, t: float, tol: float = 1e-12) -> np.ndarray:
    """Dense ``p_t(x, y) = e^{-t} sum_n t^n/n! p^(n)(x, y)``."""
    if kernel.n > 5000:
        raise ValueError("heat_kernel is dense; use heat_apply for large kernels")
    return heat_apply(kernel, np.eye(kernel.n), t, tol)


# --------------------------------------------------------------------------- Green function


def _require_transient(kernel: Kernel) -> None:
    if not kernel.killed or kernel.leak.max() <= ROW_TOL:
        raise RecurrentKernelError(
            "Green series diverges: kernel is conservative (recurrent finite chain); "
            "pass killed_truncation(kernel)")


def _green_solve(kernel: Kernel, rhs: np.ndarray, tol: float) -> np.ndarray:
    _require_transient(kernel)
    a = (sp.identity(kernel.n, format="csc") - kernel.p.tocsc())
    if kernel.n <= DIRECT_SOLVE_MAX:
        if "lu" not in kernel._cache:
            kernel._cache["lu"] = spla.splu(a.tocsc())
        return kernel._cache["lu"].solve(rhs)
    sol, info = spla.cg(a.tocsr(), rhs, rtol=tol, maxiter=20_000)
    if info != 0:
        raise RecurrentKernelError(f"conjugate gradient did not converge (info={info})")
    return sol


def green_row(killed: Kernel, x: int, tol: float = 1e-13) -> np.ndarray:
    """``G(x, .)`` for a killed kernel (by symmetry also ``G(., x)``)."""
    key = ("green", int(x))
    if key not in killed._cache:
        e = np.zeros(killed.n)
        e[x] = 1.0
        killed._cache[key] = _green_solve(killed, e, tol)
    return killed._cache[key]


def green_function(killed: Kernel, x: int, y: int, tol: float = 1e-13) -> float:
    """Expected visits to ``y`` of the killed walk started at ``x``."""
    return float(green_row(killed, x, tol)[y])


# --------------------------------------------------------------------------- windows


@dataclass(frozen=True)
class SiteWindow:
    """A set of sites, either by (side, level range) or by explicit indices.

    ``levels`` is a half-open range ``[lo, hi)``; ``sides`` is a tuple of
    ``"L"``/``"R"`` or ``None`` for both.
    """

    levels: tuple[int, int] | None = None
    sides: tuple[str, ...] | None = None
    sites: tuple[int, ...] | None = None
    label: str = ""

    @classmethod
    def below(cls, n: int, side: str | None = None) -> "SiteWindow":
        sides = (side,) if side else None
        tag = f"{side}, " if side else ""
        return cls(levels=(0, n), sides=sides, label=f"{{x: {tag}l(x)<{n}}}")

    @classmethod
    def at_level(cls, n: int, side: str | None = None) -> "SiteWindow":
        sides = (side,) if side else None
        tag = f"{side}, " if side else ""
        return cls(levels=(n, n + 1), sides=sides, label=f"{{x: {tag}l(x)={n}}}")

    @classmethod
    def explicit(cls, sites, label: str = "") -> "SiteWindow":
        return cls(sites=tuple(int(s) for s in sites), label=label or "explicit")

    @property
    def by_level(self) -> bool:
        return self.sites is None

    def mask(self, kernel: Kernel) -> np.ndarray:
        if self.sites is not None:
            m = np.zeros(kernel.n, dtype=bool)
            m[list(self.sites)] = True
            return m
        lo, hi = self.levels
        m = (kernel.level >= lo) & (kernel.level < hi)
        if self.sides is not None:
            allowed = [SIDE_NAMES.index(s) for s in self.sides]
            m &= np.isin(kernel.side, allowed)
        return m

    def contains_level(self, side: int, level: int) -> bool:
        lo, hi = self.levels
        ok = lo <= level < hi
        return ok and (self.sides is None or SIDE_NAMES[side] in self.sides)


@dataclass(frozen=True)
class WindowSup:
    value: float
    argmax: int
    margin: int
    method: str


def green_window_sums(killed: Kernel, window: SiteWindow, tol: float = 1e-13) -> np.ndarray:
    """``x -> sum_{y in window} G(x, y)`` for every site ``x``."""
    return _green_solve(killed, window.mask(killed).astype(float), tol)


def green_window_sup(killed: Kernel, window: SiteWindow, margin: int = 5,
                     tol: float = 1e-13) -> WindowSup:
    """Sup over sites at distance >= ``margin`` from the boundary of the window sum of ``G``."""
    sums = green_window_sums(killed, window, tol)
    inner = killed.interior_mask(margin)
    idx = np.flatnonzero(inner)
    best = idx[np.argmax(sums[idx])]
    return WindowSup(float(sums[best]), int(best), margin, "sparse")


# --------------------------------------------------------------------------- tree level chain


def tree_level_chain(depth: int, killed: bool = True) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Transition matrix of ``(side, level)`` for the walk on the depth-``depth`` tree.

    The level/side process of the tree walk is itself Markov, so quantities
    that only depend on side and level can be computed on ``2(depth+1)``
    states instead of ``2^(depth+2)``.  State ``(s, l)`` has index ``s*(depth+1)+l``.
    """
    m = depth + 1
    q = np.zeros((2 * m, 2 * m))
    states = [(s, l) for s in (LEFT, RIGHT) for l in range(m)]
    for s, l in states:
        i = s * m + l
        up = (1 - s) * m if l == 0 else s * m + l - 1
        q[i, up] += 1.0 / 3.0
        if l < depth:
            q[i, s * m + l + 1] += 2.0 / 3.0
        elif not killed:
            q[i, i] += 2.0 / 3.0
    return q, states


def tree_green_window_sup(depth: int, window: SiteWindow, margin: int = 5) -> WindowSup:
    """Level-chain version of :func:`green_window_sup` for tree windows given by side and level.

    Because the walk can be tracked through its (side, level) process alone,
    very deep truncations are cheap here.
    """
    if not window.by_level:
        raise ValueError("tree_green_window_sup needs a (side, level) window")
    q, states = tree_level_chain(depth, killed=True)
    rhs = np.array([1.0 if window.contains_level(s, l) else 0.0 for s, l in states])
    sums = np.linalg.solve(np.eye(len(states)) - q, rhs)
    ok = [i for i, (s, l) in enumerate(states) if l <= depth - margin]
    best = max(ok, key=lambda i: sums[i])
    return WindowSup(float(sums[best]), best, margin, "level-chain")


# --------------------------------------------------------------------------- harmonic profiles


@dataclass(frozen=True)
class HarmonicProfile:
    """Tree profile ``lam + (rho-lam)/(3*2^l)`` on L and ``rho + (lam-rho)/(3*2^l)`` on R."""

    lam: float
    rho: float

    def __post_init__(self):
        for v in (self.lam, self.rho):
            if not 0.0 <= v <= 1.0:
                raise ValueError("lam and rho must lie in [0, 1]")

    def at(self, side: int, level) -> np.ndarray:
        level = np.asarray(level, dtype=float)
        scale = 1.0 / (3.0 * np.power(2.0, level))
        if side == LEFT:
            return self.lam + (self.rho - self.lam) * scale
        return self.rho + (self.lam - self.rho) * scale

    def values(self, kernel: Kernel) -> np.ndarray:
        out = self.at(LEFT, kernel.level)
        right = kernel.side == RIGHT
        out[right] = self.at(RIGHT, kernel.level[right])
        return out


def tree_alpha(lam: float, rho: float) -> HarmonicProfile:
    return HarmonicProfile(float(lam), float(rho))


def as_alpha(kernel: Kernel, alpha) -> np.ndarray:
    """Accept a profile object or a per-site array."""
    if isinstance(alpha, HarmonicProfile):
        return alpha.values(kernel)
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 0:
        a = np.full(kernel.n, float(a))
    if a.shape != (kernel.n,):
        raise ValueError(f"alpha has shape {a.shape}, kernel has {kernel.n} sites")
    return a


def harmonicity_residual(kernel: Kernel, alpha) -> float:
    a = as_alpha(kernel, alpha)
    inner = ~kernel.boundary_mask()
    if not inner.any():
        return 0.0
    return float(np.max(np.abs(kernel.p @ a - a)[inner]))


@dataclass(frozen=True)
class DirichletSum:
    value: float
    by_level: np.ndarray
    negligible_from: int | None
    tail_estimate: float

    def __float__(self):
        return self.value


def dirichlet_sum(kernel: Kernel, alpha, negligible: float = 1e-12) -> DirichletSum:
    """``sum_{x,y} p(x,y) [alpha(y) - alpha(x)]^2`` with per-level bookkeeping.

    Each ordered pair is booked at ``min(level(x), level(y))``; only levels
    carrying off-diagonal pairs are reported.  ``negligible_from`` is the first
    level from which every contribution is below ``negligible`` (``None`` if the
    truncation ends before that).  The tail estimate extrapolates the last two
    levels geometrically to account for the part beyond the truncation.
    """
    a = as_alpha(kernel, alpha)
    coo = kernel.p.tocoo()
    off = coo.row != coo.col
    rows, cols = coo.row[off], coo.col[off]
    terms = coo.data[off] * (a[cols] - a[rows]) ** 2
    lvl = np.minimum(kernel.level[rows], kernel.level[cols])
    by_level = np.bincount(lvl, weights=terms, minlength=int(lvl.max()) + 1 if len(lvl) else 1)
    big = np.flatnonzero(np.abs(by_level) >= negligible)
    if len(big) == 0:
        first = 0
    elif big[-1] == len(by_level) - 1:
        first = None
    else:
        first = int(big[-1]) + 1
    tail = 0.0
    if len(by_level) >= 2 and by_level[-2] > 0:
        ratio = by_level[-1] / by_level[-2]
        if 0 <= ratio < 1:
            tail = float(by_level[-1] * ratio / (1 - ratio))
    return DirichletSum(float(terms.sum()), by_level, first, tail)
