"""Command line: ``sepkit <command> ...``.

Exit codes: 0 pass, 1 verdict failure, 2 usage or validation error,
3 numerical failure (horizon monitor, non-convergence).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dualcorr as dc
from . import exactevolve as ee
from . import genpoly as gp
from . import kernels as kn
from . import scenarios
from . import simulate as sim

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class VerdictFailure(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _complex(s: str) -> complex:
    try:
        return complex(s.replace(" ", ""))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from exc


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _inputs(args) -> list[Path]:
    return [Path(v) for k, v in vars(args).items() if k in ("dist", "init", "kernel_file", "config") and v]


def write_output(args, payload, csv_rows=None) -> None:
    """Emit ``payload`` to ``--out`` (or stdout) together with a run manifest."""
    payload = _jsonify(payload)
    if args.format == "csv" and csv_rows is not None:
        text = "\n".join(",".join(str(c) for c in row) for row in csv_rows) + "\n"
    else:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if not args.out:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest_path = out.with_name(out.name + ".manifest.json")
    if args.format == "json" and isinstance(payload, dict):
        payload["manifest"] = manifest_path.name
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    out.write_text(text)
    extra = [Path(p) for p in getattr(args, "_extra_outputs", [])]
    manifest = {
        "command": args.command,
        "arguments": {k: _jsonify(v) for k, v in sorted(vars(args).items())
                      if not k.startswith("_") and k != "func"},
        "master_seed": args.seed,
        "build": _build_id(),
        "inputs": {str(p): _sha256(p) for p in _inputs(args)},
        "outputs": {str(p): _sha256(p) for p in [out, *extra] if p.exists()},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _kernel_from_args(args) -> kn.Kernel:
    if getattr(args, "kernel_file", None):
        k = kn.load_kernel(args.kernel_file)
    elif args.tree_depth is not None:
        k = kn.build_binary_tree(args.tree_depth)
    elif args.line_radius is not None:
        law = {int(s): float(p) for s, p in json.loads(args.jump_law).items()}
        k = kn.build_line(args.line_radius, law)
    elif getattr(args, "two_site", None) is not None:
        import scipy.sparse as sp
        r = args.two_site
        k = kn.Kernel(p=sp.csr_matrix(np.array([[1 - r, r], [r, 1 - r]])), kind="custom",
                      level=np.zeros(2, dtype=int))
    else:
        raise ValueError("no graph given: use --tree-depth, --line-radius, --two-site or --kernel-file")
    return kn.killed_truncation(k) if getattr(args, "killed", False) and not k.killed else k


def _alpha_from_args(args, kernel: kn.Kernel):
    if args.tree_profile is not None:
        return kn.tree_alpha(*args.tree_profile)
    if args.alpha is None:
        raise ValueError("give --alpha or --tree-profile")
    vals = _floats(args.alpha)
    return vals[0] if len(vals) == 1 else np.asarray(vals)


def _window_from_args(args) -> kn.SiteWindow:
    if args.sites:
        return kn.SiteWindow.explicit(_ints(args.sites))
    if args.levels is None:
        raise ValueError("give --levels lo,hi or --sites")
    lo, hi = _ints(args.levels)
    sides = (args.side,) if args.side else None
    return kn.SiteWindow(levels=(lo, hi), sides=sides, label=f"levels [{lo},{hi}) side {args.side or 'both'}")


def _distribution(args) -> gp.SubsetDistribution:
    return gp.SubsetDistribution.from_json(_load_json(args.dist))


# --------------------------------------------------------------------------- commands


def cmd_stability(args) -> int:
    if args.mode == "pair":
        rep = gp.pair_stability(gp.PairCoefficients(args.a, args.b, args.c, args.d))
        payload = {"mode": "pair", "stable": rep.verdict, "slacks": rep.slacks, "boundary": rep.boundary}
        ok = rep.verdict
    elif args.mode == "rayleigh":
        rep = gp.rayleigh_check(_distribution(args), n_points=args.points, seed=args.seed)
        payload = {"mode": "rayleigh", "pass": rep.verdict, "worst": rep.worst, "worst_point": rep.worst_point,
                   "worst_pair": rep.worst_pair}
        ok = rep.verdict
    elif args.mode == "realroot":
        if args.coeffs:
            poly = gp.UnivariatePoly(np.asarray(_floats(args.coeffs)))
        else:
            poly = gp.diagonalize(_distribution(args))
        rep = gp.real_rooted(poly)
        payload = {"mode": "realroot", "real_rooted": rep.verdict, "roots": rep.roots, "margin": rep.margin,
                   "n_infinite": rep.n_infinite}
        ok = rep.verdict
    else:
        try:
            bv = gp.bernoulli_decomposition(_distribution(args))
        except gp.NotRealRootedError as exc:
            payload = {"mode": "decompose", "error": str(exc)}
            write_output(args, payload)
            return EXIT_FAIL if args.assert_ else EXIT_OK
        payload = {"mode": "decompose", "p": bv.p}
        ok = True
    write_output(args, payload)
    return EXIT_FAIL if args.assert_ and not ok else EXIT_OK


def cmd_evolve(args) -> int:
    kernel = _kernel_from_args(args)
    if args.init:
        dist = gp.SubsetDistribution.from_json(_load_json(args.init))
    else:
        a = kn.as_alpha(kernel, _alpha_from_args(args, kernel))
        dist = gp.from_product(a)
    alpha = None
    if kernel.killed:
        alpha = kn.as_alpha(kernel, _alpha_from_args(args, kernel))
    gen = ee.build_generator(kernel, alpha, cap=args.cap)
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        if args.stirring_steps:
            out = ee.evolve_stirring_products(dist, gen, args.t, args.stirring_steps)
        else:
            out = ee.evolve(dist, gen, args.t, tol=args.tol, trace=trace_fh)
    finally:
        if trace_fh:
            trace_fh.close()
    if args.trace:
        args._extra_outputs = [args.trace]
    payload = {**out.to_json(), "info": out.info, "occupation": ee.occupation_probabilities(out),
               "generator": gen.to_json()}
    rows = [["mask", "weight"]] + [[m, w] for m, w in enumerate(out.weights)]
    write_output(args, payload, rows)
    return EXIT_OK


def cmd_green(args) -> int:
    kernel = _kernel_from_args(args)
    if not kernel.killed:
        kernel = kn.killed_truncation(kernel)
    if args.x is not None and args.y is not None:
        payload = {"x": args.x, "y": args.y, "G": kn.green_function(kernel, args.x, args.y),
                   "distance": kernel.distance(args.x, args.y)}
        rows = [["x", "y", "G"], [args.x, args.y, payload["G"]]]
    elif args.x is not None:
        g = kn.green_row(kernel, args.x)
        payload = {"x": args.x, "row": g}
        rows = [["y", "G"]] + [[y, v] for y, v in enumerate(g)]
    else:
        w = _window_from_args(args)
        sup = kn.green_window_sup(kernel, w, margin=args.margin)
        payload = {"window": w.label, "sup": sup.value, "argmax": sup.argmax, "margin": sup.margin}
        rows = [["window", "sup"], [w.label, sup.value]]
    write_output(args, payload, rows)
    return EXIT_OK


def cmd_dual_cov(args) -> int:
    kernel = _kernel_from_args(args)
    if not kernel.killed:
        kernel = kn.killed_truncation(kernel)
    alpha = _alpha_from_args(args, kernel)
    if args.pair:
        x, y = _ints(args.pair)
        res = dc.stationary_neg_covariance(kernel, alpha, x, y, tol=args.tol)
        payload = res.to_json()
    else:
        w = _window_from_args(args)
        res = dc.window_neg_covariance_sum(kernel, alpha, w, tol=args.tol)
        payload = res.to_json()
        if args.bound:
            payload["bound"] = dc.covariance_sum_bound(kernel, alpha, w, tol=args.tol).to_json()
    write_output(args, payload, [["key", "value"], ["value", payload["value"]]])
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.statistic is None or args.kernel is None or args.t is None:
        raise ValueError("simulate needs --kernel, --t and --statistic (flags or --config)")
    alpha = args.alpha
    if isinstance(alpha, str):
        try:
            alpha = json.loads(alpha)
        except json.JSONDecodeError:
            alpha = _floats(alpha)
    spec = sim.ExperimentSpec(
        kernel=json.loads(args.kernel) if isinstance(args.kernel, str) else args.kernel,
        t=float(args.t), statistic=args.statistic, initial=args.initial,
        alpha=alpha if alpha is not None else 0.5,
        config=_ints(args.init_config) if isinstance(args.init_config, str) else args.init_config,
        window=json.loads(args.window) if isinstance(args.window, str) else args.window,
        replicas=args.replicas, seed=args.seed, dynamics=args.dynamics)
    samples = sim.run_experiment(spec, jobs=args.jobs)
    payload = {"spec": spec.to_dict(), "monitor": samples.monitor, "n": len(samples),
               "mean": float(np.mean(samples.values)), "values": samples.values}
    if args.out and args.format == "csv":
        csv_path, side = samples.write(args.out)
        args._extra_outputs = [side]
        manifest_args = argparse.Namespace(**{**vars(args), "format": "json",
                                              "out": str(csv_path) + ".summary.json"})
        write_output(manifest_args, payload)
        return EXIT_OK
    rows = [["replica", "seed", "statistic", "value"]] + [
        [i, int(s), spec.statistic, int(v)] for i, (s, v) in enumerate(zip(samples.seeds, samples.values))]
    write_output(args, payload, rows)
    return EXIT_OK


def cmd_verify(args) -> int:
    name = VERIFY_ALIASES.get(args.scenario, args.scenario)
    if name == "constants":
        res = scenarios.constants(quick=args.quick)
    elif name == "variance":
        levels = [args.level] if args.level else range(6, 11)
        res = scenarios.variance_envelope(levels=levels)
    elif name == "flux":
        times = [args.t] if args.t else (64, 256, 1024)
        res = scenarios.flux(times=times, replicas=args.replicas or 2000, seed=args.seed, jobs=args.jobs)
    else:
        levels = [args.level] if args.level else (6, 8, 10)
        res = scenarios.poisson_windows(levels=levels, replicas=args.replicas or 10_000, seed=args.seed,
                                        jobs=args.jobs)
    rows = [["name", "value", "pass"]] + [[c["name"], c["value"], c["pass"]] for c in res["checks"]]
    write_output(args, res, rows)
    return EXIT_OK if res["pass"] else EXIT_FAIL


# short aliases kept for scripts written against the original command names
VERIFY_ALIASES = {"thm1": "poisson", "thm2": "variance", "thm3": "flux"}


# --------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output file (stdout if omitted)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")


def _graph(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("graph")
    g.add_argument("--tree-depth", type=int)
    g.add_argument("--line-radius", type=int)
    g.add_argument("--jump-law", default='{"1": 0.5, "-1": 0.5}', help="JSON step -> probability")
    g.add_argument("--two-site", type=float, metavar="RATE", help="two sites joined at RATE")
    g.add_argument("--kernel-file", help="kernel JSON")
    g.add_argument("--killed", action="store_true", help="kill the walk at the truncation boundary")


def _profile(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", help="density: one value or a comma list per site")
    p.add_argument("--tree-profile", type=float, nargs=2, metavar=("LAM", "RHO"))


def _window(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", help="lo,hi (half-open)")
    p.add_argument("--side", choices=("L", "R"))
    p.add_argument("--sites", help="comma list of site indices")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stability", help="stability and real-rootedness checks")
    p.add_argument("mode", choices=("pair", "rayleigh", "realroot", "decompose"))
    for c in "abcd":
        p.add_argument(f"--{c}", type=_complex, default=0j)
    p.add_argument("--dist", help="distribution JSON {n, weights}")
    p.add_argument("--coeffs", help="comma list of polynomial coefficients (constant first)")
    p.add_argument("--points", type=int, default=100, help="random real points for the Rayleigh check")
    p.add_argument("--assert", dest="assert_", action="store_true", help="exit 1 on a negative verdict")
    _common(p)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("evolve", help="exact evolution of a subset distribution")
    _graph(p)
    _profile(p)
    p.add_argument("--init", help="initial distribution JSON (default: product of --alpha)")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--stirring-steps", type=int, help="use the Trotter product with this many steps")
    p.add_argument("--trace", help="JSON-lines file of per-chunk diagnostics")
    p.add_argument("--cap", type=int, default=gp.DEFAULT_CAP)
    _common(p)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("green", help="Green function values and window sums")
    _graph(p)
    p.add_argument("--x", type=int)
    p.add_argument("--y", type=int)
    _window(p)
    p.add_argument("--margin", type=int, default=5)
    _common(p)
    p.set_defaults(func=cmd_green)

    p = sub.add_parser("dual-cov", help="stationary covariances from the two-walker dual")
    _graph(p)
    _profile(p)
    p.add_argument("--pair", help="x,y")
    _window(p)
    p.add_argument("--bound", action="store_true", help="also report the Green-function bounds")
    p.add_argument("--tol", type=float, default=1e-10)
    _common(p)
    p.set_defaults(func=cmd_dual_cov)

    p = sub.add_parser("simulate", help="stirring Monte Carlo")
    p.add_argument("--kernel", help='JSON, e.g. {"kind": "line", "radius": 50}')
    p.add_argument("--t", type=float)
    p.add_argument("--statistic", choices=sim.STATISTICS)
    p.add_argument("--initial", choices=sim.INITIAL_LAWS, default="product")
    p.add_argument("--alpha", help="number, comma list, or JSON such as {\"tree_profile\": [0, 1]}")
    p.add_argument("--init-config", help="comma list of 0/1 for --initial explicit")
    p.add_argument("--window", help='JSON, e.g. {"levels": [3, 4], "sides": ["L"]}')
    p.add_argument("--replicas", type=int, default=1000)
    p.add_argument("--dynamics", choices=("forward", "dual"), default="forward")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="canned verification scenarios")
    p.add_argument("scenario", choices=("constants", "variance", "flux", "poisson", *VERIFY_ALIASES))
    p.add_argument("--t", type=float, help="single horizon for the flux scenario")
    p.add_argument("--level", type=int, help="single window level")
    p.add_argument("--replicas", type=int)
    p.add_argument("--quick", action="store_true", help="smaller truncations where allowed")
    _common(p)
    p.set_defaults(func=cmd_verify)
    return parser


def parse(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_json(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (dc.HorizonError, ee.ConvergenceError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
