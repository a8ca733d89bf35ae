"""Canned experiments behind ``sepkit verify`` and the scripts.

Each function returns a JSON-ready dict with a ``checks`` list; every check
records its value, target, tolerance and whether it passed.
"""
from __future__ import annotations

import math

import numpy as np

from . import dualcorr as dc
from . import kernels as kn
from . import simulate as sim
from . import stats as st


def check(name: str, value, target, tol, passed: bool | None = None, **extra) -> dict:
    if passed is None:
        passed = abs(value - target) <= tol
    return {"name": name, "value": value, "target": target, "tol": tol, "pass": bool(passed), **extra}


def summarize(name: str, checks: list, **extra) -> dict:
    return {"scenario": name, "pass": all(c["pass"] for c in checks), "checks": checks, **extra}


# --------------------------------------------------------------------------- constants


def tree_green_checks(depth: int = 20, max_dist: int = 10, tol: float = 1e-6) -> list:
    k = kn.killed_truncation(kn.build_binary_tree(depth))
    x = k.site("L", 0)
    g = kn.green_row(k, x)
    d = k.distance_row(x)
    out = []
    for dist in range(max_dist + 1):
        sel = d == dist
        err = float(np.max(np.abs(g[sel] - 2.0 ** (-dist + 1))))
        out.append(check(f"G at distance {dist}", float(g[sel].max()), 2.0 ** (-dist + 1), tol, err <= tol))
    return out


def tree_window_checks(max_n: int = 8, depth: int = 48, tol: float = 1e-4) -> list:
    out = []
    for n in range(1, max_n + 1):
        cases = [
            (kn.SiteWindow.below(n), 3.0 * n, "sup_x sum_{l(y)<n} G"),
            (kn.SiteWindow.below(n, "L"), 2.0 * n, "sup_x sum_{y in L, l(y)<n} G"),
            (kn.SiteWindow.at_level(n, "L"), 3.0 - 2.0 ** (-n), "sup_x sum_{y in L, l(y)=n} G"),
        ]
        for w, target, label in cases:
            val = kn.tree_green_window_sup(depth, w).value
            out.append(check(f"{label}, n={n}", val, target, tol))
    return out


def dirichlet_checks(tol: float = 1e-6, depth: int = 18) -> list:
    k = kn.build_binary_tree(depth)
    out = []
    for lam in (0.0, 0.3, 0.7):
        for rho in (0.1, 0.5, 1.0):
            a = kn.tree_alpha(lam, rho)
            res = kn.dirichlet_sum(k, a)
            val = res.value + res.tail_estimate
            out.append(check(f"Phi(lam={lam}, rho={rho})", val, 2 * (rho - lam) ** 2 / 9, tol))
    return out


def constants(quick: bool = False) -> dict:
    checks = tree_green_checks(depth=14 if quick else 20, max_dist=8 if quick else 10,
                               tol=1e-4 if quick else 1e-6)
    checks += tree_window_checks()
    checks += dirichlet_checks()
    r = dc.tree_refined_constant(0, 1, level_cap=30)
    checks.append(check("refined tree constant", r["value"], 40 / 189, 1e-8))
    checks.append(check("refined tree constant below 1/3", r["value"], 1 / 3, 0.0, r["value"] < 1 / 3))
    return summarize("constants", checks)


# --------------------------------------------------------------------------- variance envelope


def variance_envelope(levels=range(6, 11), depth: int = 40, eps: float = 0.02, method: str = "solve") -> dict:
    checks = []
    rows = []
    for n in levels:
        r = dc.tree_variance(0.0, 1.0, kn.SiteWindow.below(n, "L"), depth=depth, method=method)
        per = r["variance"] / n
        rows.append({"n": n, **r, "var_per_level": per})
        checks.append(check(f"Var/n, n={n}", per, [23 / 189 - eps, 1 / 3 + eps], eps,
                            23 / 189 - eps <= per <= 1 / 3 + eps))
        checks.append(check(f"variance ratio, n={n}", r["ratio"], 1.0, 1e-10, r["ratio"] <= 1 + 1e-10))
    return summarize("variance_envelope", checks, rows=rows)


# --------------------------------------------------------------------------- flux


def flux(times=(64, 256, 1024), replicas: int = 2000, seed: int = 7, jobs: int = 1,
         mean_rel: float = 0.10, var_slack: float = 0.05, ks_tol: float = 0.05) -> dict:
    env = st.flux_envelope(1.0)
    rows, checks = [], []
    for t in times:
        spec = sim.ExperimentSpec(kernel={"kind": "line", "radius": sim.line_radius(t)}, t=float(t),
                                  statistic="w_plus", initial="step", replicas=replicas, seed=seed)
        s = sim.run_experiment(spec, jobs=jobs)
        mom = st.empirical_moments(s.values)
        nd = st.normality_distance(s.values)
        mean_ratio = mom["mean"] / math.sqrt(t)
        rows.append({"t": t, "mean_ratio": mean_ratio, "var_ratio": mom["var"] / math.sqrt(t),
                     "rel_gap": abs(mean_ratio - env["mean_coeff"]) / env["mean_coeff"],
                     "ks": nd["ks"], "lattice_floor": nd["lattice_floor"], "monitor": s.monitor})
    last = rows[-1]
    checks.append(check(f"mean/sqrt(t) at t={last['t']}", last["mean_ratio"], env["mean_coeff"],
                        mean_rel * env["mean_coeff"], last["rel_gap"] <= mean_rel))
    gaps = [r["rel_gap"] for r in rows]
    checks.append(check("relative mean gap shrinks in t", gaps, "decreasing", 0.0,
                        all(b < a for a, b in zip(gaps, gaps[1:]))))
    for r in rows:
        lo, hi = env["var_lower"] - var_slack, env["var_upper"] + var_slack
        checks.append(check(f"Var/sqrt(t) at t={r['t']}", r["var_ratio"], [lo, hi], var_slack,
                            lo <= r["var_ratio"] <= hi))
    checks.append(check(f"KS at t={last['t']}", last["ks"], 0.0, ks_tol, last["ks"] <= ks_tol))
    checks.append(check("truncation monitor", min(r["monitor"]["clean_fraction"] for r in rows), 1.0,
                        0.01, all(r["monitor"]["pass"] for r in rows)))
    return summarize("flux", checks, rows=rows, envelope=env)


# --------------------------------------------------------------------------- Poisson window counts


def poisson_windows(levels=(6, 8, 10), depth: int = 12, horizon: float = 200.0, replicas: int = 10_000,
                    seed: int = 1, lam: float = 0.0, rho: float = 1.0, tv_tol: float = 0.05, jobs: int = 1) -> dict:
    rows = []
    kernel_spec = {"kind": "tree", "depth": depth, "killed": True}
    k = sim.build_kernel(kernel_spec)
    a = kn.tree_alpha(lam, rho).values(k)
    for n in levels:
        window = {"levels": [n, n + 1], "sides": ["L"]}
        spec = sim.ExperimentSpec(kernel=kernel_spec, t=horizon, statistic="window_sum",
                                  alpha={"tree_profile": [lam, rho]}, window=window, replicas=replicas,
                                  seed=seed, dynamics="dual")
        s = sim.run_experiment(spec, jobs=jobs)
        target = float(a[sim.resolve_window(k, window)].sum())
        rows.append({"n": n, "lambda": target, "tv": st.tv_poisson(s.values, target),
                     "mean": float(s.values.mean())})
    tvs = [r["tv"] for r in rows]
    checks = [check("TV nonincreasing in n", tvs, "nonincreasing", 0.0,
                    all(b <= a for a, b in zip(tvs, tvs[1:]))),
              check(f"TV at n={rows[-1]['n']}", tvs[-1], 0.0, tv_tol, tvs[-1] <= tv_tol)]
    return summarize("poisson_windows", checks, rows=rows)
