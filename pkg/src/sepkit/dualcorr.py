"""Two-particle duals and stationary covariances.

For the exclusion process, two-point functions evolve under the dynamics of
two dual walkers: ``U`` (independent) or ``V`` (exclusion: a jump onto the
partner is suppressed, the pair swaps across their common edge instead).
Starting from a product measure with harmonic density ``alpha``, the
stationary covariance obeys

    -Cov(eta(x), eta(y)) = int_0^inf [V(s) Delta](x, y) ds,
    Delta(x, y) = p(x, y) (alpha(x) - alpha(y))^2.

On a finite truncation the integral only converges when walkers can leave,
so every computation here runs on a killed kernel (the open system with
boundary reservoirs in :mod:`sepkit.exactevolve`).  A horizon monitor checks
that the integrand and the surviving pair mass are negligible before the
integral is returned.

Pair states ``(x, y)`` are stored as dense ``N x N`` arrays; the tree
functions at the bottom lump pairs into orbits of the tree's symmetry group
so truncations 40 levels deep stay cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ._uniform import MAX_CHUNK, chunk_nodes, uniformized
from .kernels import (LEFT, RIGHT, HarmonicProfile, Kernel, RecurrentKernelError, SiteWindow, as_alpha,
                      dirichlet_sum, green_window_sums, tree_alpha)


class HorizonError(RuntimeError):
    """The pair process did not die out before the horizon cap."""


# --------------------------------------------------------------------------- fields


@dataclass(frozen=True, eq=False)
class PairField:
    """Real values on ordered pairs; the diagonal is carried but ignored by ``V``."""

    values: np.ndarray
    info: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("pair field must be square")
        if not np.all(np.isfinite(v)):
            raise ValueError("pair field has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __call__(self, x, y):
        return self.values[x, y]

    def offdiag_sum(self, mask=None) -> float:
        v = self.values
        if mask is not None:
            v = v[np.ix_(mask, mask)]
        return float(v.sum() - np.trace(v))

    def is_symmetric(self, tol=0.0) -> bool:
        return bool(np.max(np.abs(self.values - self.values.T)) <= tol)


def product_field(kernel: Kernel, alpha) -> PairField:
    a = as_alpha(kernel, alpha)
    return PairField(np.outer(a, a))


def delta_field(kernel: Kernel, alpha) -> PairField:
    """``p(x,y) (alpha(x) - alpha(y))^2`` off the diagonal, zero on it."""
    a = as_alpha(kernel, alpha)
    coo = kernel.p.tocoo()
    off = coo.row != coo.col
    out = np.zeros((kernel.n, kernel.n))
    r, c = coo.row[off], coo.col[off]
    out[r, c] = coo.data[off] * (a[r] - a[c]) ** 2
    return PairField(out)


# --------------------------------------------------------------------------- generators


@dataclass(frozen=True, eq=False)
class TwoParticleGenerator:
    """``U`` or ``V`` two-walker dynamics over a kernel, acting on pair fields.

    With ``P`` the kernel (holding on the diagonal, killing where rows fall
    short of one), ``U F = P F + F P - 2F`` and, off the diagonal,
    ``V F = U F - p(x,y) [F(x,x) + F(y,y) - F(x,y) - F(y,x)]``.  ``V`` on
    diagonal states is left equal to ``U``; those states are never entered
    from off-diagonal ones.
    """

    kernel: Kernel
    variant: str

    def __post_init__(self):
        if self.variant not in ("U", "V"):
            raise ValueError("variant must be 'U' or 'V'")

    @property
    def rate(self) -> float:
        # uniformization rate: two walkers at total jump rate <= 1 each
        return 2.0

    def _edge_arrays(self):
        coo = self.kernel.p.tocoo()
        off = coo.row != coo.col
        return coo.row[off], coo.col[off], coo.data[off]

    def step(self):
        """Uniformized operator ``M = I + Q/2``, substochastic and entrywise nonnegative."""
        p = self.kernel.p.tocsr()
        rows, cols, vals = self._edge_arrays()
        interacting = self.variant == "V"

        def apply(f):
            out = 0.5 * (p @ f + (p @ f.T).T)
            if interacting:
                d = np.diag(f)
                corr = vals * (d[rows] + d[cols] - f[rows, cols] - f[cols, rows])
                out[rows, cols] -= 0.5 * corr
            return out

        return apply

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.rate * (self.step()(f) - f)

    def matrix(self) -> sp.csr_matrix:
        """Sparse generator on vectorized pair states ``x * N + y`` (small kernels only)."""
        n = self.kernel.n
        p = self.kernel.p.tocsr()
        eye = sp.identity(n, format="csr")
        q = sp.kron(p, eye) + sp.kron(eye, p) - 2.0 * sp.identity(n * n)
        if self.variant == "U":
            return q.tocsr()
        rows, cols, vals = self._edge_arrays()
        r = rows * n + cols
        corr = sp.coo_matrix(
            (np.concatenate([-vals, -vals, vals, vals]),
             (np.concatenate([r, r, r, r]),
              np.concatenate([rows * n + rows, cols * n + cols, r, cols * n + rows]))),
            shape=(n * n, n * n))
        return (q + corr).tocsr()


def pair_semigroup_apply(gen: TwoParticleGenerator, field: PairField, t: float,
                         tol: float = 1e-12) -> PairField:
    """``exp(t Q) F`` for ``Q`` = ``U`` or ``V``, by uniformization."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    out, dropped = uniformized(gen.step(), field.values, gen.rate * t, tol)
    return PairField(out, {"t": t, "dropped": dropped, "variant": gen.variant})


# --------------------------------------------------------------------------- integration


GL_LOW, GL_HIGH = 6, 12


@dataclass(frozen=True)
class IntegralResult:
    value: np.ndarray
    horizon_T: float
    boundary_leak: float
    integrand_end: float
    tolerances: dict
    quadrature_error: float


def integrate_semigroup(apply_step, rate: float, v0: np.ndarray, tol: float, probe=None,
                        survival0=None, t_max: float = 1e5, max_chunk: float = MAX_CHUNK) -> IntegralResult:
    """``int_0^T exp(sQ) v0 ds`` with ``Q = rate (M - I)`` and ``T`` grown adaptively.

    Each chunk is integrated with Gauss-Legendre rules of two orders that
    share one sweep of Poisson-weighted powers; the chunk is halved when they
    disagree.  ``survival0`` (ones on live states) is evolved alongside; the
    horizon stops when the integrand is below ``tol`` and the surviving mass
    is below ``10 * tol``.  ``probe`` restricts the monitor to some entries.
    """
    def sel(a):
        return a if probe is None else a[probe]

    x_lo, w_lo = np.polynomial.legendre.leggauss(GL_LOW)
    x_hi, w_hi = np.polynomial.legendre.leggauss(GL_HIGH)
    surv = np.ones_like(v0) if survival0 is None else survival0
    state = np.stack([v0, surv])
    acc = np.zeros_like(v0)
    t = 0.0
    h = max_chunk / rate
    err_total = 0.0

    def batched(s):
        return np.stack([apply_step(s[0]), apply_step(s[1])])

    while True:
        nodes = np.concatenate([(x_lo + 1) / 2, (x_hi + 1) / 2, [1.0]]) * h
        vals = chunk_nodes(batched, state, rate, h, nodes, tol * 1e-3)
        low = (h / 2) * np.tensordot(w_lo, vals[:GL_LOW, 0], axes=1)
        high = (h / 2) * np.tensordot(w_hi, vals[GL_LOW:GL_LOW + GL_HIGH, 0], axes=1)
        err = float(np.max(np.abs(sel(high - low)))) if np.size(sel(high)) else 0.0
        if err > tol * max(h, 1.0) and h > 1e-3:
            h /= 2
            continue
        acc += high
        err_total += err
        state = vals[-1]
        t += h
        integrand = float(np.max(np.abs(sel(state[0])))) if np.size(sel(state[0])) else 0.0
        leak = float(np.max(sel(state[1]))) if np.size(sel(state[1])) else 0.0
        if integrand < tol and leak < 10 * tol:
            return IntegralResult(acc, t, leak, integrand, {"tol": tol, "monitor": 10 * tol}, err_total)
        if t >= t_max:
            raise HorizonError(
                f"pair mass {leak:.3g} still alive at T={t:.4g}: the boundary is felt before the "
                "integrand decays; use a killed (or deeper) truncation")
        h = min(2 * h, max_chunk / rate)


# --------------------------------------------------------------------------- covariances


@dataclass(frozen=True)
class CovarianceResult:
    value: float
    pair: tuple | None
    window: str | None
    horizon_T: float
    boundary_leak: float
    tolerances: dict
    method: str = "quadrature"
    matrix: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        out = {
            "value": self.value,
            "horizon_T": self.horizon_T,
            "boundary_leak": self.boundary_leak,
            "tolerances": self.tolerances,
            "method": self.method,
        }
        if self.pair is not None:
            out["pair"] = list(self.pair)
        if self.window is not None:
            out["window"] = self.window
        return out


def _constant(a: np.ndarray) -> bool:
    return bool(np.all(a == a[0]))


def neg_covariance_matrix(kernel: Kernel, alpha, tol: float = 1e-10, method: str = "quadrature",
                          probe=None, t_max: float = 1e5) -> CovarianceResult:
    """All pairs of ``-Cov(eta(x), eta(y))`` under the stationary measure with density ``alpha``.

    ``V`` is a symmetric matrix on pair states, so integrating ``V(s) Delta``
    forward once yields every pair.  ``method="solve"`` replaces the
    quadrature by a direct solve of ``(-V) u = Delta`` (small kernels).
    """
    a = as_alpha(kernel, alpha)
    n = kernel.n
    if _constant(a):
        return CovarianceResult(0.0, None, None, 0.0, 0.0, {"tol": tol}, "exact", np.zeros((n, n)))
    delta = delta_field(kernel, a).values
    gen = TwoParticleGenerator(kernel, "V")
    if method == "solve":
        off = ~np.eye(n, dtype=bool).ravel()
        q = gen.matrix()[off][:, off]
        u = np.zeros(n * n)
        u[off] = spsolve((-q).tocsc(), delta.ravel()[off])
        mat = u.reshape(n, n)
        return CovarianceResult(float("nan"), None, None, math.inf, 0.0, {"tol": tol}, "solve", mat)
    surv = 1.0 - np.eye(n)
    res = integrate_semigroup(gen.step(), gen.rate, delta, tol, probe=probe, survival0=surv, t_max=t_max)
    mat = res.value.copy()
    np.fill_diagonal(mat, 0.0)
    return CovarianceResult(float("nan"), None, None, res.horizon_T, res.boundary_leak,
                            {**res.tolerances, "quadrature_error": res.quadrature_error}, "quadrature", mat)


def stationary_neg_covariance(kernel: Kernel, alpha, x: int, y: int, tol: float = 1e-10,
                              t_max: float = 1e5) -> CovarianceResult:
    """``-Cov(eta(x), eta(y))`` from the dual integral with the horizon monitor on ``(x, y)``."""
    if x == y:
        raise ValueError("x and y must differ")
    res = neg_covariance_matrix(kernel, alpha, tol, probe=(np.array([x, y]), np.array([y, x])), t_max=t_max)
    return CovarianceResult(float(res.matrix[x, y]), (int(x), int(y)), None, res.horizon_T,
                            res.boundary_leak, res.tolerances, res.method)


def window_neg_covariance_sum(kernel: Kernel, alpha, window: SiteWindow, tol: float = 1e-10,
                              t_max: float = 1e5) -> CovarianceResult:
    """``sum_{x != y in window} -Cov(eta(x), eta(y))``.

    Tree kernels with a :class:`HarmonicProfile` and a level window use the
    lumped pair chain; the full pair field would need ``n^2`` memory.
    """
    if kernel.kind == "tree" and isinstance(alpha, HarmonicProfile) and window.by_level:
        return tree_neg_covariance_sum(alpha.lam, alpha.rho, window, kernel.params["depth"], tol)
    mask = window.mask(kernel)
    idx = np.flatnonzero(mask)
    probe = np.ix_(idx, idx)
    res = neg_covariance_matrix(kernel, alpha, tol, probe=probe, t_max=t_max)
    sub = res.matrix[probe]
    return CovarianceResult(float(sub.sum() - np.trace(sub)), None, window.label, res.horizon_T,
                            res.boundary_leak, res.tolerances, res.method, res.matrix)


@dataclass(frozen=True)
class BoundResult:
    final: float
    coarse: float
    dirichlet: float
    green_sup: float
    horizon_T: float
    window: str

    def to_json(self) -> dict:
        return {"window": self.window, "value": self.final, "coarse": self.coarse,
                "dirichlet": self.dirichlet, "green_sup": self.green_sup, "horizon_T": self.horizon_T}


def covariance_sum_bound(kernel: Kernel, alpha, window: SiteWindow, tol: float = 1e-10,
                         t_max: float = 1e5) -> BoundResult:
    """Upper bounds for ``sum_{x,y in window} -Cov``.

    ``final`` is ``sum_{x,y} Delta(x,y) int_0^inf P^x(X_s in W) P^y(X_s in W) ds``
    computed from single killed walks; ``coarse`` is
    ``Phi(alpha) * sup_x sum_{u in W} G(x, u)``.
    """
    if not kernel.killed or kernel.leak.max() <= 0.0:
        raise RecurrentKernelError("the Green series diverges on a conservative chain; "
                                   "pass killed_truncation(kernel)")
    killed = kernel
    a = as_alpha(killed, alpha)
    delta = sp.csr_matrix(delta_field(killed, a).values)
    phi = dirichlet_sum(killed, a).value
    gsum = green_window_sums(killed, window)
    gsup = float(gsum.max())
    if phi == 0.0:
        return BoundResult(0.0, 0.0, 0.0, gsup, 0.0, window.label)
    ind = window.mask(killed).astype(float)
    p = killed.p.tocsr()
    x_hi, w_hi = np.polynomial.legendre.leggauss(GL_HIGH)
    t, total, h = 0.0, 0.0, MAX_CHUNK
    cur = ind
    while True:
        nodes = np.concatenate([(x_hi + 1) / 2, [1.0]]) * h
        vals = chunk_nodes(lambda v: p @ v, cur, 1.0, h, nodes, tol * 1e-3)
        quad = sum(w * float(v @ (delta @ v)) for w, v in zip(w_hi, vals[:-1]))
        total += (h / 2) * quad
        cur = vals[-1]
        t += h
        tail = float(cur.max()) ** 2 * float(delta.sum())
        if tail < tol:
            break
        if t >= t_max:
            raise HorizonError("single walks do not leave the window; the kernel looks recurrent")
    return BoundResult(total, phi * gsup, phi, gsup, t, window.label)


def variance_ratio(kernel: Kernel, alpha, window: SiteWindow, tol: float = 1e-10) -> dict:
    """``Var(sum_W eta) / sum_W alpha(1-alpha)``; at most one by negative association.

    A tree kernel with a :class:`HarmonicProfile` goes through the lumped
    pair chain, which treats the truncation's leaves as killing.
    """
    if kernel.kind == "tree" and isinstance(alpha, HarmonicProfile) and window.by_level:
        # exact lumping: same answer as the pair-field computation, far cheaper
        out = tree_variance(alpha.lam, alpha.rho, window, kernel.params["depth"], tol)
        if out["independent"] == 0.0:
            raise ZeroDivisionError("alpha(1 - alpha) vanishes on the window")
        return out
    killed = kernel
    a = as_alpha(killed, alpha)
    mask = window.mask(killed)
    den = float(np.sum(a[mask] * (1 - a[mask])))
    if den == 0.0:
        raise ZeroDivisionError("alpha(1 - alpha) vanishes on the window")
    if _constant(a):
        return {"ratio": 1.0, "variance": den, "independent": den, "neg_cov_sum": 0.0}
    cov = window_neg_covariance_sum(killed, a, window, tol)
    var = den - cov.value
    return {"ratio": var / den, "variance": var, "independent": den, "neg_cov_sum": cov.value,
            "horizon_T": cov.horizon_T}


# --------------------------------------------------------------------------- binary tree


def tree_refined_constant(lam: float = 0.0, rho: float = 1.0, level_cap: int = 30) -> dict:
    """``3 sum_{x,y} Delta(x,y) e(x) e(y)`` summed level by level.

    ``e(x)`` is the chance the walk from ``x`` ends up in L, which for the
    harmonic profile is ``(rho - alpha(x)) / (rho - lam)``.  Edges are the basis
    edge plus ``2^n`` edges between levels ``n-1`` and ``n`` on each side;
    the remainder beyond ``level_cap`` is bounded by the last term (ratio 1/2).
    """
    if lam == rho:
        return {"value": 0.0, "tail": 0.0, "terms": []}
    prof = tree_alpha(lam, rho)

    def esc(side, level):
        return (rho - prof.at(side, level)) / (rho - lam)

    def edge(side_a, la, side_b, lb):
        d = float(prof.at(side_a, la) - prof.at(side_b, lb))
        return d * d * esc(side_a, la) * esc(side_b, lb)

    # ordered pairs: factor 2 per undirected edge
    terms = [2 * edge(LEFT, 0, RIGHT, 0)]
    for n in range(1, level_cap + 1):
        terms.append(2 * 2 ** n * (edge(LEFT, n, LEFT, n - 1) + edge(RIGHT, n, RIGHT, n - 1)))
    return {"value": float(sum(terms)), "tail": float(terms[-1]), "terms": terms}


def _tree_pair_states(depth: int):
    """Orbits of ordered distinct pairs under the automorphisms fixing each side.

    Keys: ``("d", sx, lx, ly)`` for different sides (x on ``sx``) and
    ``("s", s, lx, ly, m)`` for the same side with common ancestor at level ``m``.
    """
    keys = []
    for sx in (LEFT, RIGHT):
        for lx in range(depth + 1):
            for ly in range(depth + 1):
                keys.append(("d", sx, lx, ly))
    for s in (LEFT, RIGHT):
        for lx in range(depth + 1):
            for ly in range(depth + 1):
                for m in range(min(lx, ly) + 1):
                    if m == lx == ly:
                        continue
                    keys.append(("s", s, lx, ly, m))
    return keys


def _orbit_size(key) -> int:
    if key[0] == "d":
        return 2 ** (key[2] + key[3])
    _, _, lx, ly, m = key
    if m == lx:
        return 2 ** ly
    if m == ly:
        return 2 ** lx
    return 2 ** (lx + ly - m - 1)


def _swap_roles(key):
    if key[0] == "d":
        return ("d", 1 - key[1], key[3], key[2])
    return ("s", key[1], key[3], key[2], key[4])


def _x_moves(key, depth):
    """Targets of a move by x (rate 1/3 per neighbour) and the killing rate."""
    out = []
    killed = 0.0
    third = 1.0 / 3.0
    if key[0] == "d":
        _, sx, lx, ly = key
        if lx >= 1:
            out.append((("d", sx, lx - 1, ly), third))
        elif ly >= 1:
            out.append((("s", 1 - sx, 0, ly, 0), third))
        if lx < depth:
            out.append((("d", sx, lx + 1, ly), 2 * third))
        else:
            killed += 2 * third
        return out, killed
    _, s, lx, ly, m = key
    if lx >= 1:
        if not (m == ly == lx - 1):
            out.append((("s", s, lx - 1, ly, min(m, lx - 1)), third))
    else:
        out.append((("d", 1 - s, 0, ly), third))
    if lx < depth:
        if m == lx:
            if ly != lx + 1:
                out.append((("s", s, lx + 1, ly, lx + 1), third))
            out.append((("s", s, lx + 1, ly, lx), third))
        else:
            out.append((("s", s, lx + 1, ly, m), 2 * third))
    else:
        killed += 2 * third
    return out, killed


def _adjacent(key) -> bool:
    if key[0] == "d":
        return key[2] == 0 and key[3] == 0
    _, _, lx, ly, m = key
    return (m == lx and ly == lx + 1) or (m == ly and lx == ly + 1)


@dataclass(frozen=True, eq=False)
class TreePairChain:
    depth: int
    keys: list
    index: dict
    q: sp.csr_matrix
    sizes: np.ndarray


def tree_pair_chain(depth: int) -> TreePairChain:
    """Lumped ``V`` dynamics of two exclusion walkers on the killed depth-``depth`` tree."""
    keys = _tree_pair_states(depth)
    index = {k: i for i, k in enumerate(keys)}
    rows, cols, vals = [], [], []
    diag = np.zeros(len(keys))
    for i, k in enumerate(keys):
        moves, kill = _x_moves(k, depth)
        ymoves, ykill = _x_moves(_swap_roles(k), depth)
        moves = moves + [(_swap_roles(t), r) for t, r in ymoves]
        if _adjacent(k):
            moves.append((_swap_roles(k), 1.0 / 3.0))
        for target, r in moves:
            rows.append(i)
            cols.append(index[target])
            vals.append(r)
            diag[i] -= r
        diag[i] -= kill + ykill
    q = sp.coo_matrix((vals, (rows, cols)), shape=(len(keys), len(keys))).tocsr() + sp.diags(diag)
    sizes = np.array([_orbit_size(k) for k in keys], dtype=float)
    return TreePairChain(depth, keys, index, q.tocsr(), sizes)


def _tree_delta(chain: TreePairChain, lam: float, rho: float) -> np.ndarray:
    prof = tree_alpha(lam, rho)
    out = np.zeros(len(chain.keys))
    for i, k in enumerate(chain.keys):
        if not _adjacent(k):
            continue
        if k[0] == "d":
            ax, ay = prof.at(k[1], 0), prof.at(1 - k[1], 0)
        else:
            ax, ay = prof.at(k[1], k[2]), prof.at(k[1], k[3])
        out[i] = (ax - ay) ** 2 / 3.0
    return out


def _tree_in_window(key, window: SiteWindow) -> bool:
    if key[0] == "d":
        return window.contains_level(key[1], key[2]) and window.contains_level(1 - key[1], key[3])
    return window.contains_level(key[1], key[2]) and window.contains_level(key[1], key[3])


def tree_neg_covariance_sum(lam: float, rho: float, window: SiteWindow, depth: int = 40,
                            tol: float = 1e-11, method: str = "quadrature") -> CovarianceResult:
    """``sum_{x != y in window} -Cov`` on the killed tree via the lumped pair chain."""
    if not window.by_level:
        raise ValueError("tree pair sums need a (side, level) window")
    chain = tree_pair_chain(depth)
    delta = _tree_delta(chain, lam, rho)
    inside = np.array([_tree_in_window(k, window) for k in chain.keys])
    if not delta.any():
        return CovarianceResult(0.0, None, window.label, 0.0, 0.0, {"tol": tol}, "exact")
    if method == "solve":
        u = spsolve((-chain.q).tocsc(), delta)
        return CovarianceResult(float(chain.sizes[inside] @ u[inside]), None, window.label, math.inf, 0.0,
                                {"tol": tol, "depth": depth}, "solve")
    step = sp.identity(len(chain.keys), format="csr") + chain.q / 2.0
    res = integrate_semigroup(lambda v: step @ v, 2.0, delta, tol, probe=inside)
    value = float(chain.sizes[inside] @ res.value[inside])
    return CovarianceResult(value, None, window.label, res.horizon_T, res.boundary_leak,
                            {**res.tolerances, "depth": depth, "quadrature_error": res.quadrature_error},
                            "quadrature")


def tree_variance(lam: float, rho: float, window: SiteWindow, depth: int = 40, tol: float = 1e-11,
                  method: str = "quadrature") -> dict:
    """Stationary ``Var(sum_W eta)`` on the tree with profile ``tree_alpha(lam, rho)``."""
    prof = tree_alpha(lam, rho)
    lo, hi = window.levels
    den = 0.0
    for side in (LEFT, RIGHT):
        for lvl in range(lo, hi):
            if window.contains_level(side, lvl):
                a = float(prof.at(side, lvl))
                den += 2 ** lvl * a * (1 - a)
    cov = tree_neg_covariance_sum(lam, rho, window, depth, tol, method)
    var = den - cov.value
    return {"variance": var, "independent": den, "neg_cov_sum": cov.value,
            "ratio": var / den if den else float("nan"), "horizon_T": cov.horizon_T,
            "boundary_leak": cov.boundary_leak, "depth": depth}
