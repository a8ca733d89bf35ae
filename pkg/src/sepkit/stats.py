"""Sample summaries, limit-law distances and the constants of the flux statistic."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special
from scipy import stats as sst

CI_LEVEL = 0.99
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
INV_2_SQRT_PI = 1.0 / (2.0 * math.sqrt(math.pi))


# --------------------------------------------------------------------------- moments


def empirical_moments(samples, level: float = CI_LEVEL) -> dict:
    """Mean and unbiased variance with normal-approximation confidence intervals."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    n = x.size
    z = float(sst.norm.ppf(0.5 + level / 2))
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    half = z * math.sqrt(var / n)
    m4 = float(np.mean((x - mean) ** 4))
    # large-sample variance of the sample variance
    var_se = math.sqrt(max(m4 - var * var * (n - 3) / (n - 1), 0.0) / n)
    return {
        "n": n,
        "mean": mean,
        "var": var,
        "mean_ci": [mean - half, mean + half],
        "var_ci": [var - z * var_se, var + z * var_se],
        "level": level,
    }


# --------------------------------------------------------------------------- Poisson


def _as_counts(samples) -> np.ndarray:
    x = np.asarray(samples)
    if x.size == 0:
        raise ValueError("no samples")
    if not np.issubdtype(x.dtype, np.integer):
        xf = x.astype(float)
        if not np.all(np.isfinite(xf)) or np.any(xf != np.round(xf)):
            raise ValueError("Poisson distance needs integer samples")
        x = xf.astype(np.int64)
    if (x < 0).any():
        raise ValueError("Poisson distance needs nonnegative samples")
    return x.ravel()


def tv_poisson_frequencies(freq, lam: float) -> float:
    """Total variation between frequencies on ``0..K`` and Poisson(``lam``); mass beyond ``K`` is one bin."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    f = np.asarray(freq, dtype=float)
    k = np.arange(len(f))
    pmf = sst.poisson.pmf(k, lam)
    tail = float(sst.poisson.sf(len(f) - 1, lam))
    return 0.5 * (float(np.abs(f - pmf).sum()) + tail)


def tv_poisson(samples, lam: float) -> float:
    """``(1/2) sum_k |empirical(k) - Poisson(lam; k)|`` with the tail past the largest sample folded in."""
    x = _as_counts(samples)
    return tv_poisson_frequencies(np.bincount(x) / x.size, lam)


# --------------------------------------------------------------------------- normality


def normality_distance(samples) -> dict:
    """KS distance of self-standardized samples to N(0,1), plus shape moments.

    ``lattice_floor`` is half the largest atom of the standardized samples: no
    integer-valued statistic can get closer than that in KS.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 50:
        raise ValueError("need at least 50 samples")
    sd = float(x.std(ddof=1))
    if sd == 0.0:
        raise ValueError("zero variance")
    z = (x - x.mean()) / sd
    _, counts = np.unique(x, return_counts=True)
    return {
        "ks": float(sst.kstest(z, "norm").statistic),
        "skewness": float(sst.skew(x)),
        "excess_kurtosis": float(sst.kurtosis(x)),
        "lattice_floor": 0.5 * float(counts.max()) / x.size,
        "n": int(x.size),
    }


# --------------------------------------------------------------------------- constants


def same_side_probability(r: float, tol: float = 1e-10) -> float:
    """``E[Phi(cN)^2 + (1 - Phi(cN))^2]`` with ``c = sqrt(r / (2(1-r)))``.

    Conditionally on ``N``, two further independent normals fall on the same
    side of ``cN`` with that probability, so this is a one-dimensional
    integral against the normal density.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError("r must lie in [0, 1)")
    if r == 0.0:
        return 0.5
    c = math.sqrt(r / (2.0 * (1.0 - r)))

    def f(x):
        p = special.ndtr(c * x)
        return (p * p + (1 - p) * (1 - p)) * math.exp(-0.5 * x * x) * INV_SQRT_2PI

    val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=tol, epsrel=0.0, limit=200)
    return float(val)


@dataclass(frozen=True)
class ConstantValue:
    value: float
    error: float
    refinements: tuple
    method: str

    def __float__(self):
        return self.value


@lru_cache(maxsize=None)
def flux_variance_constant() -> ConstantValue:
    """``int_0^1 h(r) / (2 sqrt r) dr`` with ``h`` = :func:`same_side_probability`.

    The substitution ``r = u^2`` removes the endpoint singularity, leaving
    ``int_0^1 h(u^2) du``.  Two tolerance levels must agree within 1e-6.
    """
    def g(u):
        return same_side_probability(u * u, tol=1e-12) if u < 1.0 else 1.0

    coarse, _ = integrate.quad(g, 0.0, 1.0, epsabs=1e-7, limit=50)
    fine, err = integrate.quad(g, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12, limit=200)
    if abs(fine - coarse) > 1e-6:
        raise ArithmeticError(f"quadrature refinements disagree: {coarse} vs {fine}")
    return ConstantValue(float(fine), max(float(err), abs(fine - coarse)), (float(coarse), float(fine)),
                         "adaptive Gauss-Kronrod on u in [0,1] after r = u^2")


def flux_envelope(sigma: float = 1.0) -> dict:
    """Limits of ``E W_t / sqrt t`` and bounds on ``Var W_t / sqrt t`` for jump-law scale ``sigma``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h = flux_variance_constant()
    return {
        "mean_coeff": sigma * INV_SQRT_2PI,
        "var_lower": (1.0 - h.value) * sigma * INV_2_SQRT_PI,
        "var_upper": sigma * INV_2_SQRT_PI,
        "H": h.value,
        "H_error": h.error,
    }


# names used by the command line and the experiment configs
h_of_r = same_side_probability
H_constant = flux_variance_constant
thm3_envelope = flux_envelope


# --------------------------------------------------------------------------- verdicts


@dataclass
class LimitReport:
    statistic: str
    n_samples: int
    mean: float | None
    var: float | None
    ci: dict
    target: dict
    metrics: dict
    passed: bool
    tolerances: dict
    inputs: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "LimitReport":
        d = dict(d)
        d["passed"] = d.pop("pass")
        return cls(**d)


DEFAULT_TOLERANCES = {"tv": 0.05, "ks": 0.05, "mean_rel": 0.10, "var_slack": 0.05}


def verdict(samples, target: dict, tolerances: dict | None = None, statistic: str = "statistic") -> LimitReport:
    """Compare samples with a target law and return a :class:`LimitReport`.

    Targets: ``{"law": "poisson", "lambda": ...}``, ``{"law": "normal"}``, or
    ``{"law": "flux", "t": ..., "sigma": ...}`` (mean and variance of ``W_t``
    against :func:`flux_envelope`).
    """
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    x = np.asarray(samples)
    law = target.get("law")
    inputs = {"n_samples": int(x.size)}
    try:
        mom = empirical_moments(x)
        mean, var = mom["mean"], mom["var"]
        ci = {"mean": mom["mean_ci"], "var": mom["var_ci"], "level": mom["level"]}
    except ValueError:
        mom, mean, var, ci = None, None, None, {}

    def report(metrics, passed):
        return LimitReport(statistic, int(x.size), mean, var, ci, dict(target), metrics, bool(passed), tol, inputs)

    if law == "poisson":
        lam = float(target["lambda"])
        tv = tv_poisson(x, lam)
        return report({"tv": tv}, tv <= tol["tv"])
    if law == "normal":
        try:
            nd = normality_distance(x)
        except ValueError as exc:
            return report({"error": str(exc)}, False)
        return report(nd, nd["ks"] <= tol["ks"])
    if law == "flux":
        if mom is None:
            raise ValueError("flux target needs at least two samples")
        t = float(target["t"])
        env = flux_envelope(float(target.get("sigma", 1.0)))
        mean_ratio = mean / math.sqrt(t)
        var_ratio = var / math.sqrt(t)
        rel_gap = abs(mean_ratio - env["mean_coeff"]) / env["mean_coeff"]
        in_env = env["var_lower"] - tol["var_slack"] <= var_ratio <= env["var_upper"] + tol["var_slack"]
        metrics = {"mean_ratio": mean_ratio, "var_ratio": var_ratio, "mean_rel_gap": rel_gap,
                   "var_in_envelope": bool(in_env), **env}
        return report(metrics, rel_gap <= tol["mean_rel"] and in_env)
    raise ValueError(f"unknown target law {law!r}")
