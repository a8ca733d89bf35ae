"""Independent reference computations used by the tests.

Nothing here imports the package; each oracle recomputes a quantity from
first principles (closed forms, brute-force enumeration, dense linear algebra).
"""
import itertools
import math

import numpy as np
from scipy import linalg, optimize


# ---------------------------------------------------------------- tree


def tree_vertices(depth):
    """Vertices as (side, path) with path a tuple of 0/1 child choices."""
    return [(s, p) for s in "LR" for l in range(depth + 1)
            for p in itertools.product((0, 1), repeat=l)]


def tree_dist(a, b):
    if a[0] != b[0]:
        return len(a[1]) + len(b[1]) + 1
    pa, pb = a[1], b[1]
    k = 0
    while k < min(len(pa), len(pb)) and pa[k] == pb[k]:
        k += 1
    return len(pa) + len(pb) - 2 * k


def tree_green_closed(d):
    """Green function of the rate-1/3 walk on the infinite 3-regular tree."""
    return 2.0 ** (-d + 1)


def window_sup_closed_form(in_window, n_levels, depth=None):
    """Sup over x of sum_{y in window} 2^{-d(x,y)+1} on the infinite tree.

    ``in_window(side, level)`` selects the window.  Vertices on the same side
    and level are equivalent under tree automorphisms fixing the basis edge,
    so one representative per (side, level) suffices.  The window is enumerated
    up to ``n_levels`` levels, x is searched to ``n_levels + 2``.
    """
    depth = n_levels + 2 if depth is None else depth
    verts = tree_vertices(depth)
    window = [v for v in verts if in_window(v[0], len(v[1]))]
    best = -1.0
    for s in "LR":
        for l in range(depth + 1):
            x = (s, (0,) * l)
            val = sum(tree_green_closed(tree_dist(x, y)) for y in window)
            best = max(best, val)
    return best


# ---------------------------------------------------------------- chains


def two_state_heat(t, rate):
    """p_t(1,1) for the walk with p(1,2) = p(2,1) = rate and holding 1-rate."""
    return 0.5 * (1.0 + math.exp(-2.0 * rate * t))


def dense_heat(p, t):
    p = np.asarray(p, dtype=float)
    return linalg.expm(t * (p - np.eye(len(p))))


# ---------------------------------------------------------------- polynomials


def pair_stability_bruteforce(a, b, c, d):
    """True if ``a + b z + c w + d z w`` has no zero with Im z > 0 and Im w > 0.

    For w in the upper half-plane the zero in z is ``-(a + c w)/(b + d w)``;
    maximize its imaginary part over w by a grid plus Nelder-Mead.
    """
    a, b, c, d = (complex(v) for v in (a, b, c, d))
    if b == 0 and d == 0:
        # no z-dependence: zero set is {w = -a/c} for all z
        if c == 0:
            return a != 0
        return (-a / c).imag <= 1e-12 * max(1.0, abs(a / c))
    if abs(b * c - a * d) <= 1e-14 * max(abs(b * c), abs(a * d), 1e-300):
        # h factorizes; one factor depends on w only, one on z only
        if d != 0:
            w_root, z_root = -b / d, -c / d
        elif b != 0:
            # a = b*c/... : h = (b)(z + a/b) + c w  with bc = ad = 0 -> c = 0
            w_root, z_root = None, -a / b
        else:
            w_root, z_root = -a / c, None
        hits = [r for r in (w_root, z_root) if r is not None]
        return all(r.imag <= 1e-12 * max(1.0, abs(r)) for r in hits)

    def im_z(w):
        den = b + d * w
        if abs(den) < 1e-300:
            return -np.inf
        z = -(a + c * w) / den
        return z.imag / max(1.0, abs(z))

    best = -np.inf
    start = None
    us = np.concatenate([[0.0], np.logspace(-6, 6, 25), -np.logspace(-6, 6, 25)])
    vs = np.logspace(-12, 6, 37)
    for u in us:
        for v in vs:
            val = im_z(complex(u, v))
            if val > best:
                best, start = val, (u, math.log(v))
    res = optimize.minimize(lambda q: -im_z(complex(q[0], math.exp(q[1]))), start,
                            method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 4000})
    best = max(best, -res.fun)
    return best <= 1e-12


def poly_from_roots_bernoulli(ps):
    out = np.ones(1)
    for p in ps:
        out = np.convolve(out, [1.0 - p, p])
    return out


def brute_rayleigh(weights, n, z, i, j, h=1e-4):
    """Rayleigh expression by finite differences of Q at real z (multi-affine, so exact up to rounding)."""
    def q(zz):
        tot = 0.0
        for mask in range(2 ** n):
            term = weights[mask]
            for k in range(n):
                if mask >> k & 1:
                    term *= zz[k]
            tot += term
        return tot

    z = np.array(z, dtype=float)
    ei = np.eye(n)[i]
    ej = np.eye(n)[j]
    # multi-affine: differences are exact derivatives
    qi = q(z + ei) - q(z)
    qj = q(z + ej) - q(z)
    qij = q(z + ei + ej) - q(z + ei) - q(z + ej) + q(z)
    return qi * qj - q(z) * qij


# ---------------------------------------------------------------- exclusion chains


def dense_exclusion_generator(n, edges, reservoirs=()):
    """Dense 2^n x 2^n generator acting on distributions (columns sum to zero).

    ``edges`` is a list of (i, j, rate); ``reservoirs`` a list of (site, rate, density).
    """
    size = 2 ** n
    q = np.zeros((size, size))
    for m in range(size):
        for i, j, r in edges:
            if (m >> i & 1) != (m >> j & 1):
                t = m ^ (1 << i) ^ (1 << j)
                q[t, m] += r
                q[m, m] -= r
        for x, r, b in reservoirs:
            occ = m >> x & 1
            flip = r * (1 - b) if occ else r * b
            q[m ^ (1 << x), m] += flip
            q[m, m] -= flip
    return q


def sector_chain_stationary(n, edges, w0):
    """Limit of exp(tQ) w0 for a closed exclusion chain via eigendecomposition of the symmetric generator."""
    q = dense_exclusion_generator(n, edges)
    vals, vecs = linalg.eigh(q)
    null = vecs[:, np.abs(vals) < 1e-10]
    return null @ (null.T @ np.asarray(w0, dtype=float))


def product_weights(ps):
    n = len(ps)
    out = np.empty(2 ** n)
    for m in range(2 ** n):
        w = 1.0
        for k, p in enumerate(ps):
            w *= p if m >> k & 1 else 1 - p
        out[m] = w
    return out


def marginals(weights, n):
    return np.array([sum(weights[m] for m in range(2 ** n) if m >> k & 1) for k in range(n)])


# ---------------------------------------------------------------- normal integrals


def same_side_closed_form(r):
    """P(N2, N3 on the same side of c N1): the two events are normal orthant
    probabilities with correlation c^2 / (1 + c^2) = r / (2 - r)."""
    return 0.5 + math.asin(r / (2.0 - r)) / math.pi


def same_side_monte_carlo(r, n, rng):
    c = math.sqrt(r / (2.0 * (1.0 - r)))
    n1, n2, n3 = rng.standard_normal((3, n))
    hit = (n2 < c * n1) == (n3 < c * n1)
    return hit.mean(), hit.std(ddof=1) / math.sqrt(n)


FLUX_CONSTANT_CLOSED_FORM = 2.0 - math.sqrt(2.0)
