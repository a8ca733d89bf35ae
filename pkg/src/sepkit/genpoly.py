"""Generating polynomials of measures on {0,1}^n.

A :class:`SubsetDistribution` stores ``2^n`` weights indexed by bitmask
(site ``k`` is bit ``k``).  The same vector is read as the multi-affine
polynomial ``Q(z) = sum_A weight(A) prod_{i in A} z_i``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

DEFAULT_CAP = 20
SUM_TOL = 1e-12


class NotRealRootedError(ValueError):
    def __init__(self, message, root=None):
        super().__init__(message)
        self.root = root


def _bits(n: int) -> np.ndarray:
    """``bits[k, A]`` = membership of site ``k`` in subset ``A``."""
    idx = np.arange(2 ** n)
    return ((idx[None, :] >> np.arange(n)[:, None]) & 1).astype(bool)


def popcount(n: int) -> np.ndarray:
    return _bits(n).sum(axis=0)


@dataclass(frozen=True, eq=False)
class SubsetDistribution:
    n: int
    weights: np.ndarray
    info: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (2 ** self.n,):
            raise ValueError(f"expected {2 ** self.n} weights, got {w.shape}")
        if self.n > self.info.get("cap", DEFAULT_CAP):
            raise ValueError(f"n={self.n} exceeds the site cap")
        if (w < -1e-12).any():
            raise ValueError("negative weight")
        if abs(w.sum() - 1.0) > SUM_TOL * max(1, w.size) ** 0.5:
            raise ValueError(f"weights sum to {w.sum()}")
        object.__setattr__(self, "weights", w)

    def to_json(self) -> dict:
        return {"n": self.n, "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, obj) -> "SubsetDistribution":
        return cls(int(obj["n"]), np.asarray(obj["weights"], dtype=float))

    @classmethod
    def point_mass(cls, config) -> "SubsetDistribution":
        config = [int(b) for b in config]
        w = np.zeros(2 ** len(config))
        w[sum(b << k for k, b in enumerate(config))] = 1.0
        return cls(len(config), w)


@dataclass(frozen=True)
class UnivariatePoly:
    """Coefficients ``c_k = P(particle count = k)`` of ``Q*(w) = Q(w, ..., w)``."""

    coeffs: np.ndarray

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, w):
        return np.polynomial.polynomial.polyval(w, self.coeffs)

    def to_json(self) -> dict:
        return {"coeffs": [float(c) for c in self.coeffs]}

    @classmethod
    def from_json(cls, obj) -> "UnivariatePoly":
        return cls(np.asarray(obj["coeffs"], dtype=float))


def from_product(alphas) -> SubsetDistribution:
    a = np.asarray(alphas, dtype=float)
    if ((a < 0) | (a > 1)).any():
        raise ValueError("marginals must lie in [0, 1]")
    bits = _bits(len(a))
    w = np.prod(np.where(bits, a[:, None], 1.0 - a[:, None]), axis=0)
    return SubsetDistribution(len(a), w)


def diagonalize(dist: SubsetDistribution) -> UnivariatePoly:
    counts = popcount(dist.n)
    return UnivariatePoly(np.bincount(counts, weights=dist.weights, minlength=dist.n + 1))


def marginal_mean(dist: SubsetDistribution, i: int) -> float:
    mask = (np.arange(2 ** dist.n) >> i) & 1
    return float(dist.weights[mask == 1].sum())


def pairwise_covariance(dist: SubsetDistribution, i: int, j: int) -> float:
    idx = np.arange(2 ** dist.n)
    both = ((idx >> i) & 1) & ((idx >> j) & 1)
    return float(dist.weights[both == 1].sum()) - marginal_mean(dist, i) * marginal_mean(dist, j)


def covariance_matrix(dist: SubsetDistribution) -> np.ndarray:
    bits = _bits(dist.n).astype(float)
    m = bits @ dist.weights
    second = (bits * dist.weights) @ bits.T
    return second - np.outer(m, m)


def transposition_mix(dist: SubsetDistribution, i: int, j: int, p: float) -> SubsetDistribution:
    """``p * Q + (1-p) * Q`` with variables ``z_i`` and ``z_j`` exchanged."""
    n = dist.n
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise ValueError(f"bad index pair ({i}, {j}) for n={n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    idx = np.arange(2 ** n)
    diff = ((idx >> i) ^ (idx >> j)) & 1
    swapped = idx ^ ((diff << i) | (diff << j))
    w = p * dist.weights + (1.0 - p) * dist.weights[swapped]
    return SubsetDistribution(n, w, dict(dist.info))


# --------------------------------------------------------------------------- real roots


@dataclass(frozen=True)
class RootReport:
    verdict: bool
    roots: np.ndarray
    margin: float
    n_infinite: int


def _taylor_at(coeffs: np.ndarray, c: float, k: int) -> tuple[float, float]:
    """k-th Taylor coefficient of the polynomial at ``c`` as ``(mantissa, log_scale)``.

    The value is ``mantissa * exp(log_scale)`` and ``|mantissa| <= 1`` measures
    it against the sum of absolute terms, so roots of any magnitude are safe.
    """
    if c == 0:
        return float(np.sign(coeffs[k])), (math.log(abs(coeffs[k])) if coeffs[k] else 0.0)
    j = np.arange(k, len(coeffs))
    with np.errstate(divide="ignore"):
        logs = (np.log(np.abs(coeffs[k:])) + np.array([math.log(math.comb(int(jj), k)) for jj in j])
                + (j - k) * math.log(abs(c)))
    top = logs.max()
    if not np.isfinite(top):
        return 0.0, 0.0
    signs = np.sign(coeffs[k:]) * np.where((j - k) % 2 == 1, np.sign(c), 1.0)
    mags = np.exp(logs - top)
    return float((signs * mags).sum() / mags.sum()), float(top + math.log(mags.sum()))


def _polish(coeffs: np.ndarray, c: float, m: int, steps: int = 4) -> complex:
    """Newton on the (m-1)-th derivative, whose root at an m-fold root is simple."""
    for _ in range(steps):
        top, ltop = _taylor_at(coeffs, c, m - 1)
        slope, lslope = _taylor_at(coeffs, c, m)
        if slope == 0.0:
            break
        step = top / (m * slope) * math.exp(min(ltop - lslope, 700.0))
        if not np.isfinite(step) or abs(step) > 0.5 * (1 + abs(c)):
            break
        c -= step
    return complex(c)


def _single_linkage(roots: np.ndarray, radius: float) -> list[list[int]]:
    todo = list(range(len(roots)))
    groups = []
    while todo:
        group = [todo.pop(0)]
        grew = True
        while grew:
            grew = False
            for k in list(todo):
                if any(abs(roots[k] - roots[g]) <= radius * (1 + abs(roots[g])) for g in group):
                    group.append(k)
                    todo.remove(k)
                    grew = True
        groups.append(group)
    return groups


def _merge_clusters(roots: np.ndarray, coeffs: np.ndarray, radii, certify_rtol: float) -> np.ndarray:
    """Replace rounding-split multiple roots by their real centroid.

    An ``m``-fold root perturbed by rounding spreads to a ring of radius about
    ``eps**(1/m)``, so clusters are grown at increasing linkage radii.  A cluster
    of ``m`` roots is accepted as an ``m``-fold root at its centroid ``c`` only
    if the first ``m`` Taylor coefficients at ``c`` vanish to rounding accuracy;
    genuine complex pairs fail that test and are left alone.
    """
    out = roots.copy()
    open_idx = np.flatnonzero(np.abs(roots.imag) > 0)
    for radius in radii:
        if len(open_idx) == 0:
            break
        # real roots nearby may belong to the same multiple root
        pool = np.flatnonzero(np.isin(np.arange(len(roots)), open_idx) | (out.imag == 0))
        settled = set()
        for group in _single_linkage(roots[pool], radius):
            idx = pool[group]
            if len(idx) < 2 or not np.isin(idx, open_idx).any():
                continue
            c = complex(np.mean(roots[idx]))
            if abs(c.imag) > 1e-8 * (1 + abs(c)):
                continue
            c = _polish(coeffs, c.real, len(idx))
            if all(abs(_taylor_at(coeffs, c.real, k)[0]) <= certify_rtol for k in range(len(idx))):
                out[idx] = c.real
                settled.update(idx.tolist())
        open_idx = np.array([i for i in open_idx if i not in settled], dtype=int)
    return out


def _refine_structure(coeffs: np.ndarray, roots: np.ndarray, steps: int = 8) -> np.ndarray:
    """Gauss-Newton on the distinct roots with multiplicities held fixed.

    Minimizes the coefficientwise relative residual of
    ``lead * prod (w - r_j)^{m_j}``; for a fixed multiplicity pattern the
    distinct roots are well conditioned.  Returns ``roots`` unchanged when the
    expansion leaves floating-point range.
    """
    P = np.polynomial.polynomial
    centers, mults = np.unique(roots, return_counts=True)
    lead = coeffs[-1]
    weight = 1.0 / np.maximum(np.abs(coeffs), 1e-16 * np.abs(coeffs).max())

    def resid(cs):
        with np.errstate(over="ignore", invalid="ignore"):
            return (lead * P.polyfromroots(np.repeat(cs, mults)) - coeffs) * weight

    cur = centers.astype(complex)
    r = resid(cur)
    if not np.all(np.isfinite(r)):
        return roots
    res = np.linalg.norm(r)
    for _ in range(steps):
        jac = np.empty((len(coeffs), len(cur)), dtype=complex)
        for j in range(len(cur)):
            m = mults.copy()
            m[j] -= 1
            col = -mults[j] * lead * P.polyfromroots(np.repeat(cur, m))
            jac[:, j] = np.pad(col, (0, len(coeffs) - len(col))) * weight
        if not np.all(np.isfinite(jac)):
            break
        trial = cur - np.linalg.lstsq(jac, r, rcond=None)[0]
        r_trial = resid(trial)
        trial_res = np.linalg.norm(r_trial)
        if not trial_res < res:
            break
        cur, r, res = trial, r_trial, trial_res
    real = np.abs(centers.imag) == 0
    cur[real] = cur[real].real
    return np.repeat(cur, mults)


def _companion_roots(c: np.ndarray) -> np.ndarray:
    comp = np.zeros((len(c) - 1, len(c) - 1))
    comp[0, :] = -c[-2::-1] / c[-1]
    comp[1:, :-1] += np.eye(len(c) - 2)
    return np.linalg.eigvals(comp).astype(complex)


def _scale_groups(logs: np.ndarray, gap: float = 25.0) -> list[tuple[int, int, float]]:
    """Newton polygon of ``log|c_k|``: groups ``(k_lo, k_hi, log_modulus)`` of root magnitudes.

    Roots in different groups differ in modulus by more than ``exp(gap)``.
    """
    pts = [(k, v) for k, v in enumerate(logs) if np.isfinite(v)]
    hull = []
    for p in pts:
        while len(hull) >= 2 and ((hull[-1][1] - hull[-2][1]) * (p[0] - hull[-2][0])
                                  <= (p[1] - hull[-2][1]) * (hull[-1][0] - hull[-2][0])):
            hull.pop()
        hull.append(p)
    edges = [(a[0], b[0], -(b[1] - a[1]) / (b[0] - a[0])) for a, b in zip(hull, hull[1:])]
    groups = []
    for lo, hi, mod in edges:
        if groups and abs(groups[-1][2] - mod) < gap:
            glo, ghi, gmod = groups[-1]
            groups[-1] = (glo, hi, (gmod * (ghi - glo) + mod * (hi - lo)) / (hi - glo))
        else:
            groups.append((lo, hi, mod))
    return groups


def _roots_by_scale(c: np.ndarray) -> np.ndarray:
    """Roots of a polynomial whose roots may span hundreds of orders of magnitude.

    Each group of the Newton polygon is solved after rescaling the variable to
    that group's modulus, keeping the roots ranked into the group's slots.
    """
    with np.errstate(divide="ignore"):
        logs = np.log(np.abs(c))
    groups = _scale_groups(logs)
    if len(groups) == 1 and abs(groups[0][2]) < 25.0:
        return _companion_roots(c)
    out = []
    for lo, hi, mod in groups:
        scaled_logs = logs + np.arange(len(c)) * mod
        scaled = np.sign(c) * np.exp(scaled_logs - np.max(scaled_logs[np.isfinite(scaled_logs)]))
        # terms negligible at this modulus only carry roots of other groups
        outside = np.ones(len(c), dtype=bool)
        outside[lo:hi + 1] = False
        scaled[outside & (np.abs(scaled) < 1e-32)] = 0.0
        nz = np.flatnonzero(scaled)
        first, last = nz[0], nz[-1]
        u = _companion_roots(scaled[first:last + 1]) if last > first else np.zeros(0, complex)
        # ``first`` roots underflowed to 0; larger ones beyond ``last`` overflowed away
        u = np.concatenate([np.zeros(first, complex), u])
        order = np.argsort(np.abs(u))
        out.append(u[order[lo:hi]] * math.exp(mod))
    return np.concatenate(out)


CLUSTER_RADII = (1e-3, 1e-2, 0.03, 0.1, 0.3, 1.0)


def real_rooted(q: UnivariatePoly, tol: float = 1e-8, certify_rtol: float = 1e-9) -> RootReport:
    """Decide real-rootedness from companion-matrix eigenvalues.

    Leading zero coefficients are stripped and counted as roots at infinity.
    The verdict holds when every finite root has ``|Im r| <= tol * max(1, |r|)``;
    ``margin`` is the largest ``|Im r|``.  Roots are found per magnitude band of
    the Newton polygon, and rounding-split multiple roots are re-merged when a
    Taylor test certifies them.  Coefficients that underflowed in double
    precision are gone, so marginals within about 1e-300**(1/n) of 0 or 1 can
    produce a spurious negative verdict.
    """
    c = np.asarray(q.coeffs, dtype=float)
    scale = np.abs(c).max() if len(c) else 0.0
    if scale == 0.0:
        raise ValueError("zero polynomial")
    c = c / scale
    top = len(c) - 1
    while top > 0 and c[top] == 0.0:
        top -= 1
    n_inf = len(c) - 1 - top
    c = c[:top + 1]
    n_zero = 0
    while n_zero < top and c[n_zero] == 0.0:
        n_zero += 1
    core = c[n_zero:]
    if len(core) > 1:
        roots = _roots_by_scale(core)
        merged = _merge_clusters(roots, core, CLUSTER_RADII, certify_rtol)
        if len(np.unique(merged)) < len(merged):
            merged = _refine_structure(core, merged)
        roots = merged
    else:
        roots = np.zeros(0, dtype=complex)
    roots = np.concatenate([np.zeros(n_zero, dtype=complex), roots])
    roots = roots[np.argsort(roots.real)]
    margin = float(np.abs(roots.imag).max()) if len(roots) else 0.0
    ok = bool(np.all(np.abs(roots.imag) <= tol * np.maximum(1.0, np.abs(roots))))
    return RootReport(ok, roots, margin, n_inf)


@dataclass(frozen=True)
class BernoulliVector:
    p: np.ndarray

    def polynomial(self) -> np.ndarray:
        """Coefficients of ``prod_i (p_i w + 1 - p_i)``."""
        out = np.ones(1)
        for pi in self.p:
            out = np.convolve(out, [1.0 - pi, pi])
        return out


def bernoulli_decomposition(dist: SubsetDistribution | UnivariatePoly, tol: float = 1e-8) -> BernoulliVector:
    """Independent Bernoulli parameters whose sum has the law of the particle count."""
    q = diagonalize(dist) if isinstance(dist, SubsetDistribution) else dist
    n = q.degree
    rep = real_rooted(q, tol)
    if not rep.verdict:
        worst = rep.roots[np.argmax(np.abs(rep.roots.imag))]
        raise NotRealRootedError(f"Q* has a non-real root {worst:.6g}", root=worst)
    w = -rep.roots.real
    if (w < -tol * np.maximum(1.0, np.abs(w))).any():
        bad = rep.roots[np.argmin(w)]
        raise NotRealRootedError(f"Q* has a positive root {bad:.6g}", root=bad)
    w = np.clip(w, 0.0, None)
    p = np.concatenate([1.0 / (1.0 + w), np.zeros(rep.n_infinite)])
    p = np.sort(p)[::-1][:n]
    return BernoulliVector(p)


# --------------------------------------------------------------------------- Sturm cross-check


def _poly_divmod(num: list[Fraction], den: list[Fraction]):
    num = list(num)
    out = [Fraction(0)] * max(1, len(num) - len(den) + 1)
    while len(num) >= len(den) and any(num):
        shift = len(num) - len(den)
        f = num[-1] / den[-1]
        out[shift] = f
        for i, d in enumerate(den):
            num[i + shift] -= f * d
        num.pop()
        while num and num[-1] == 0:
            num.pop()
    return out, num


def _trim(p):
    p = list(p)
    while p and p[-1] == 0:
        p.pop()
    return p


def _deriv(p):
    return [k * c for k, c in enumerate(p)][1:]


def _gcd(a, b):
    a, b = _trim(a), _trim(b)
    while b:
        _, r = _poly_divmod(a, b)
        a, b = b, _trim(r)
    return [c / a[-1] for c in a]


def _sign_changes(seq) -> int:
    s = [x for x in seq if x != 0]
    return sum(1 for u, v in zip(s, s[1:]) if (u > 0) != (v > 0))


def sturm_distinct_real_roots(coeffs) -> tuple[int, int]:
    """Exact ``(distinct real roots, distinct roots)`` over the rationals.

    Slow; meant as a cross-check of :func:`real_rooted` on exact inputs.
    """
    p = _trim([Fraction(c) for c in coeffs])
    if not p:
        raise ValueError("zero polynomial")
    g = _gcd(p, _deriv(p)) if len(p) > 2 else [Fraction(1)]
    sq, _ = _poly_divmod(p, g) if len(g) > 1 else (p, None)
    sq = _trim(sq)
    seq = [sq, _trim(_deriv(sq))]
    while len(seq[-1]) > 1:
        _, r = _poly_divmod(seq[-2], seq[-1])
        r = _trim([-c for c in r])
        if not r:
            break
        seq.append(r)
    lead = [s[-1] for s in seq]
    at_neg = [s[-1] * (-1) ** (len(s) - 1) for s in seq]
    return _sign_changes(at_neg) - _sign_changes(lead), len(sq) - 1


# --------------------------------------------------------------------------- stability


@dataclass(frozen=True)
class StabilityReport:
    verdict: bool
    slacks: np.ndarray
    boundary: bool

    @property
    def min_slack(self) -> float:
        return float(self.slacks.min())


def stability_slacks(a: complex, b: complex, c: complex, d: complex) -> np.ndarray:
    """Left minus right side of the five inequalities characterizing stability of ``a + bz + cw + dzw``."""
    a, b, c, d = (complex(v) for v in (a, b, c, d))
    conj = np.conj
    return np.array([
        (b * conj(c) - a * conj(d)).real - abs(b * c - a * d),
        (a * conj(b)).imag,
        (a * conj(c)).imag,
        (b * conj(d)).imag,
        (c * conj(d)).imag,
    ])


@dataclass(frozen=True)
class PairCoefficients:
    """``h(z, w) = a + b z + c w + d z w``."""

    a: complex
    b: complex
    c: complex
    d: complex

    def __post_init__(self):
        if all(complex(v) == 0 for v in (self.a, self.b, self.c, self.d)):
            raise ValueError("all coefficients are zero")

    def __iter__(self):
        return iter((self.a, self.b, self.c, self.d))


def pair_stability(pc: PairCoefficients | tuple, margin_tol: float = 1e-12) -> StabilityReport:
    """Exact stability test for ``h(z, w) = a + bz + cw + dzw``.

    Stable means no zero with both ``Im z > 0`` and ``Im w > 0``.  Slacks within
    ``margin_tol`` of zero are flagged as ``boundary``: the verdict there is
    sign-unstable in floating point.
    """
    a, b, c, d = PairCoefficients(*pc)
    s = stability_slacks(a, b, c, d)
    m = s.min()
    return StabilityReport(bool(m >= -margin_tol), s, bool(abs(m) <= margin_tol))


def pair_coefficients(dist: SubsetDistribution, i: int, j: int, z) -> PairCoefficients:
    """``(a, b, c, d)`` with ``Q = a + b z_i + c z_j + d z_i z_j`` at the other coordinates ``z``."""
    z = np.asarray(z)
    bits = _bits(dist.n)
    others = [k for k in range(dist.n) if k not in (i, j)]
    mono = np.ones(2 ** dist.n, dtype=np.result_type(z, float))
    for k in others:
        mono = np.where(bits[k], mono * z[k], mono)
    t = dist.weights * mono
    bi, bj = bits[i], bits[j]
    return PairCoefficients(t[~bi & ~bj].sum(), t[bi & ~bj].sum(), t[~bi & bj].sum(), t[bi & bj].sum())


# --------------------------------------------------------------------------- Rayleigh


@dataclass(frozen=True)
class RayleighReport:
    verdict: bool
    worst: float
    worst_point: np.ndarray
    worst_pair: tuple[int, int]


def default_points(n: int, n_points: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3.0, 3.0, size=(n_points, n))
    return np.vstack([pts, np.ones((1, n))])


def rayleigh_values(dist: SubsetDistribution, points: np.ndarray, i: int, j: int) -> np.ndarray:
    """``dQ/dz_i * dQ/dz_j - Q * d2Q/dz_i dz_j`` at each row of ``points``.

    Splitting ``Q = A + B z_i + C z_j + D z_i z_j`` reduces the expression to
    ``BC - AD`` with ``A..D`` evaluated at the remaining coordinates.
    """
    n = dist.n
    bits = _bits(n)
    others = [k for k in range(n) if k not in (i, j)]
    pts = np.atleast_2d(points)
    mono = np.ones((pts.shape[0], 2 ** n))
    for k in others:
        mono = np.where(bits[k][None, :], mono * pts[:, k:k + 1], mono)
    t = mono * dist.weights[None, :]
    bi, bj = bits[i], bits[j]
    a = t[:, ~bi & ~bj].sum(axis=1)
    b = t[:, bi & ~bj].sum(axis=1)
    c = t[:, ~bi & bj].sum(axis=1)
    d = t[:, bi & bj].sum(axis=1)
    return b * c - a * d


def rayleigh_check(dist: SubsetDistribution, points=None, pairs=None, tol: float = 1e-12,
                   seed: int = 0, n_points: int = 100) -> RayleighReport:
    """Sampled Rayleigh inequality at real points.

    This is a necessary-condition check only: passing at finitely many points
    does not prove the strong Rayleigh property.  Default points are
    ``n_points`` uniform draws from ``[-3, 3]^n`` plus the all-ones vector.
    """
    n = dist.n
    pts = default_points(n, n_points, seed) if points is None else np.atleast_2d(np.asarray(points, float))
    if pts.shape[1] != n:
        raise ValueError(f"points must have {n} coordinates")
    pairs = list(itertools.combinations(range(n), 2)) if pairs is None else [tuple(p) for p in pairs]
    worst, where, which = np.inf, None, None
    for i, j in pairs:
        vals = rayleigh_values(dist, pts, i, j)
        k = int(np.argmin(vals))
        if vals[k] < worst:
            worst, where, which = float(vals[k]), pts[k], (i, j)
    if which is None:
        return RayleighReport(True, 0.0, np.ones(n), (0, 0))
    return RayleighReport(bool(worst >= -tol), worst, where, which)
