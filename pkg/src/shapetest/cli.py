"""Command-line front end: constrained fits, shape tests, simulations.

``shapetest fit`` writes the constrained fit (coefficients, residuals,
binding set, plus a 512-point curve sample for plotting), ``shapetest test``
runs the full bootstrap-calibrated test and writes a JSON report, and
``shapetest simulate`` reproduces a Monte Carlo scenario table.  Exit codes:
0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import constraints as con
from .bsplines import make_knot_system
from .bootstrap import run_shape_test
from .errors import DataFormatError, ShapeTestError
from .estimation import constrained_fit, constrained_fit_family, ols_fit, pspline_penalty, scedastic_fit
from .estimation import cross_validate_lambda
from .khmaladze import full_design
from .simharness import ScenarioConfig, run_mc


def read_xy_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Two-column data; header optional, columns named x,y or positional."""
    xs, ys = [], []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    start = 0
    cols = (0, 1)
    head = [c.strip().lower() for c in lines[0].split(",")]
    if any(not _is_number(c) for c in head):
        start = 1
        if "x" in head and "y" in head:
            cols = (head.index("x"), head.index("y"))
    for ln, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = [c.strip() for c in line.split(",")]
        try:
            xs.append(float(parts[cols[0]]))
            ys.append(float(parts[cols[1]]))
        except (ValueError, IndexError):
            raise DataFormatError(f"{path}: malformed row at line {ln}: {line!r}") from None
    if not xs:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(xs), np.array(ys)


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _parse_params(body: str) -> dict:
    params = {}
    if not body:
        return params
    for item in body.split(","):
        if "=" in item:
            key, val = item.split("=", 1)
            params[key.strip()] = val.strip()
        else:
            params[item.strip()] = True
    return params


def resolve_shape(spec: str, domain: tuple[float, float], l_prime: int, degree: int):
    """Map a shape token to (basis, constraint set or candidate family).

    Tokens: ``monotone:inc|dec``, ``convex``, ``concave``,
    ``derivsign:r=..,d=..,c=..``, ``ushape:s0=..,join=..``,
    ``symmetry:s0=..``, ``quasiconvex``, ``rconvex:r=..`` (index 1 is plain
    convexity, 0 log-convexity), ``logconvex``, ``mnconvex:<PAIR>``.
    """
    name, _, body = spec.partition(":")
    name = name.strip().lower()
    params = _parse_params(body)
    ks = make_knot_system(degree, l_prime, domain)
    if name == "monotone":
        d = +1 if params.get("dec") is None and "dec" not in body.lower() else -1
        if "inc" in params:
            d = +1
        return ks, con.derivative_sign_constraints(ks, 1, d)
    if name in ("convex", "concave"):
        return ks, con.derivative_sign_constraints(ks, 2, +1 if name == "convex" else -1)
    if name == "derivsign":
        r = int(params.get("r", 1))
        d = +1 if str(params.get("d", "+1")).lstrip("+") in ("1", "") else -1
        c = float(params.get("c", 0.0))
        return ks, con.derivative_sign_constraints(ks, r, d, c_r=c)
    if name == "ushape":
        s0 = float(params["s0"])
        join = str(params.get("join", "smooth"))
        left = make_knot_system(degree, l_prime, (domain[0], s0))
        right = make_knot_system(degree, l_prime, (s0, domain[1]))
        return [left, right], con.ushape_constraints(left, right, join=join)
    if name == "symmetry":
        s0 = float(params.get("s0", 0.5 * (domain[0] + domain[1])))
        left = make_knot_system(degree, l_prime, (domain[0], s0))
        right = make_knot_system(degree, l_prime, (s0, domain[1]))
        return [left, right], con.symmetry_constraints(left, right, s0)
    if name == "quasiconvex":
        return ks, con.quasiconvexity_candidates(ks)
    if name == "rconvex":
        return ks, con.rho_convexity_constraints(ks, float(params.get("r", 0.0)))
    if name == "logconvex":
        return ks, con.log_convexity_constraints(ks)
    if name == "mnconvex":
        token = next(iter(params)) if params else ""
        return ks, con.mn_convexity_constraints(ks, str(token))
    raise DataFormatError(f"unknown shape token {spec!r}")


def _data_domain(xs: np.ndarray) -> tuple[float, float]:
    return float(xs.min()), float(xs.max())


def _penalty_for(args, X, y):
    if args.mode != "pspline":
        return None
    D = pspline_penalty(X.shape[1], 2)
    lam = cross_validate_lambda(X, y, D, (0.0, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3))
    return (D, lam)


def cmd_fit(args) -> int:
    xs, ys = read_xy_csv(args.input)
    basis, S = resolve_shape(args.shape, _data_domain(xs), args.lprime, args.degree)
    X = full_design(basis, xs)
    penalty = _penalty_for(args, X, ys)
    if isinstance(S, list):
        idx, fit = constrained_fit_family(X, ys, S, penalty=penalty)
        S_used = S[idx]
    else:
        idx, fit = None, constrained_fit(X, ys, S, penalty=penalty)
        S_used = S
    grid = np.linspace(xs.min(), xs.max(), 512)
    curve = full_design(basis, grid) @ fit.beta_hat
    doc = fit.to_json_dict()
    doc["residuals"] = fit.residuals.tolist()
    doc["shape"] = args.shape
    if idx is not None:
        doc["selected_candidate"] = idx
    with open(args.out + ".json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(args.out + "_grid.csv", "w") as fh:
        fh.write("x,fitted\n")
        for g, c in zip(grid, curve):
            fh.write(f"{g!r},{c!r}\n")
    print(f"fit written to {args.out}.json (SSE={fit.sse:.6g}, "
          f"{len(fit.binding)} binding constraints)")
    return 0


def cmd_test(args) -> int:
    xs, ys = read_xy_csv(args.input)
    basis, S = resolve_shape(args.shape, _data_domain(xs), args.lprime, args.degree)
    X = full_design(basis, xs)
    penalty = _penalty_for(args, X, ys)
    if isinstance(S, list):
        idx, _ = constrained_fit_family(X, ys, S, penalty=penalty)
        S = S[idx]
    sced = None
    if args.hetero:
        resid = ols_fit(X, ys).residuals
        ks1 = make_knot_system(1, args.hetero_knots, _data_domain(xs))
        sced = scedastic_fit(xs, resid, ks1)
    levels = tuple(float(v) for v in args.levels.split(","))
    result = run_shape_test(
        xs, ys, basis, S, B=args.boot, levels=levels, seed=args.seed,
        penalty=penalty, varsigma=args.varsigma, direction=args.direction,
        scedastic=sced,
    )
    doc = result.to_json_dict()
    with open(args.out + ".json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    stats = result.statistics
    print(f"direction={result.direction}  sigma_hat={result.sigma_hat:.6g}  "
          f"binding={len(result.binding_labels)}")
    print(f"{'stat':>6} {'value':>10} " + " ".join(f"cv@{l:g}" for l in levels))
    for name, value in zip(("ks", "cvm", "ad"), stats.as_array()):
        cvs = " ".join(f"{result.report.critical_value(l, name):.4f}" for l in levels)
        flags = ",".join(str(l) for l in levels if result.rejections[l][name])
        verdict = f"reject@{flags}" if flags else "accept"
        print(f"{name:>6} {value:10.4f} {cvs}  {verdict}")
    print(f"report written to {args.out}.json")
    return 0


def cmd_simulate(args) -> int:
    levels = tuple(float(v) for v in args.levels.split(","))
    cfg = ScenarioConfig(
        scenario=args.scenario, n=args.n, sigma=args.sigma, l_prime=args.lprime,
        degree=args.degree, spline_mode=args.mode, levels=levels,
        mc_reps=args.reps, bootstrap_reps=args.boot, warp=args.warp,
        seed=args.seed, a=args.dip, join=args.join,
    )
    res = run_mc(cfg)
    res.write_csv(args.out + "_table.csv")
    res.write_manifest(args.out + "_manifest.json")
    for row in res.table_rows():
        print(f"{row['statistic']:>4} @ {row['level']:<5g} rejection {row['rejection_rate']:.4f} "
              f"({row['rejections']}/{row['mc_reps']})")
    if res.failures:
        print(f"{len(res.failures)} replication(s) failed; see manifest")
    print(f"table written to {args.out}_table.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapetest",
                                     description="Shape-restriction tests for regression functions")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--input", required=True, help="CSV with columns x,y")
        p.add_argument("--shape", required=True, help="shape token, e.g. monotone:inc")
        p.add_argument("--lprime", type=int, default=6, help="number of subintervals")
        p.add_argument("--degree", type=int, default=3)
        p.add_argument("--mode", choices=("bspline", "pspline"), default="bspline")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output path prefix")

    p_fit = sub.add_parser("fit", help="constrained least-squares fit")
    common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_test = sub.add_parser("test", help="shape-restriction test with bootstrap critical values")
    common(p_test)
    p_test.add_argument("--boot", type=int, default=399, help="bootstrap replications")
    p_test.add_argument("--levels", default="0.10,0.05,0.01")
    p_test.add_argument("--hetero", action="store_true",
                        help="normalize by an estimated scedastic function")
    p_test.add_argument("--hetero-knots", type=int, default=5,
                        help="subintervals of the degree-1 scedastic basis")
    p_test.add_argument("--direction", choices=("right", "left"), default="right")
    p_test.add_argument("--varsigma", type=float, default=None,
                        help="trimming exponent in (1/2, 1); off when omitted")
    p_test.set_defaults(func=cmd_test)

    p_sim = sub.add_parser("simulate", help="Monte Carlo rejection-rate table")
    p_sim.add_argument("--scenario", type=int, required=True, choices=(1, 2, 3, 4, 5))
    p_sim.add_argument("--n", type=int, default=1000)
    p_sim.add_argument("--sigma", type=float, default=0.25)
    p_sim.add_argument("--lprime", type=int, default=6)
    p_sim.add_argument("--degree", type=int, default=3)
    p_sim.add_argument("--mode", choices=("bspline", "pspline"), default="bspline")
    p_sim.add_argument("--reps", type=int, default=200)
    p_sim.add_argument("--boot", type=int, default=199)
    p_sim.add_argument("--warp", action="store_true")
    p_sim.add_argument("--levels", default="0.10,0.05")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--dip", type=float, default=50.0, help="scenario 4 parameter a")
    p_sim.add_argument("--join", choices=("continuous", "smooth"), default="continuous")
    p_sim.add_argument("--out", required=True, help="output path prefix")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ShapeTestError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
