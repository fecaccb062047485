"""Command-line entry point.

Exit codes: 0 success, 1 partial run or estimators out of tolerance,
2 bad config, unknown id, or an unsupported operation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import DPRiskError, SeedSpec
from .fixtures import DEFAULTS, _merge, build_environment, default_n, list_fixtures
from .landscape import dr_grid_1d, dr_slice, oracle_points
from .experiments import load_config, run_experiment
from .riskgrad import validate_gradients

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

# flag name -> fixture parameter name
PARAM_FLAGS = {
    "gamma": "gamma",
    "a1": "a1",
    "b1": "b1",
    "a2": "a2",
    "b2": "b2",
    "sigma1": "sigma1",
    "sigma2": "sigma2",
    "sigma": "sigma",
    "a0": "a0",
    "mu0": "mu0",
    "eps": "eps",
    "lambda_": "lam",
    "dim": "dim",
    "cov_scale": "cov_scale",
    "model": "model",
    "hidden": "hidden",
    "source": "source",
    "path": "path",
    "feature_dim": "feature_dim",
    "pool_n": "n",
}


FLOAT_FLAGS = {
    "gamma": "mixture weight of component 1",
    "a1": "mixture component 1 slope",
    "b1": "mixture component 1 offset",
    "a2": "mixture component 2 slope",
    "b2": "mixture component 2 offset",
    "sigma1": "mixture component 1 noise scale",
    "sigma2": "mixture component 2 noise scale",
    "sigma": "noise scale of the cosine and nonlinear maps",
    "a0": "nonlinear map offset (the slope is --a1)",
    "eps": "price sensitivity or strategic step size",
    "cov-scale": "pricing demand covariance scale s (Sigma = s I)",
}


def _floats(text: str):
    vals = [float(v) for v in text.split(",")]
    return vals[0] if len(vals) == 1 else vals


def _add_fixture_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("fixture parameters (unset flags keep the fixture defaults)")
    g.add_argument("--fixture", required=True, help=f"one of {', '.join(DEFAULTS)}")
    for name, text in FLOAT_FLAGS.items():
        g.add_argument(f"--{name}", type=float, default=None, help=text)
    g.add_argument("--lambda", dest="lambda_", type=float, default=None, help="coupling penalty weight")
    g.add_argument("--mu0", type=_floats, default=None, help="base demand, scalar or comma list")
    g.add_argument("--dim", type=int, default=None, help="parameter dimension for pricing fixtures")
    g.add_argument("--model", choices=["logistic", "mlp2"], default=None, help="strategic classifier")
    g.add_argument("--hidden", type=int, default=None, help="mlp2 hidden width")
    g.add_argument("--source", choices=["synthetic", "gmc"], default=None, help="strategic data source")
    g.add_argument("--path", default=None, help="delinquency CSV for --source gmc")
    g.add_argument("--feature-dim", type=int, default=None, help="synthetic credit feature count")
    g.add_argument("--pool-n", type=int, default=None, help="strategic pool size")


def _fixture_params(args) -> dict:
    if args.fixture not in DEFAULTS:
        raise DPRiskError(f"unknown fixture {args.fixture!r}; choose from {sorted(DEFAULTS)}")
    params = {}
    for flag, key in PARAM_FLAGS.items():
        val = getattr(args, flag, None)
        if val is None:
            continue
        if key not in DEFAULTS[args.fixture]:
            raise DPRiskError(f"--{flag.rstrip('_').replace('_', '-')} does not apply to fixture {args.fixture!r}")
        params[key] = val
    return params


def _vector(text: str | None, dim: int, fallback) -> np.ndarray:
    if text is None:
        return np.asarray(fallback, dtype=np.float64)
    v = np.atleast_1d(np.asarray(_floats(text), dtype=np.float64))
    return np.full(dim, v[0]) if v.size == 1 else v


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    cfg = load_config(cfg_path)
    result = run_experiment(cfg, args.out, base_dir=cfg_path.parent)
    summary = {"n_runs": result.n_runs, "partial": result.partial, "out": str(args.out)}
    print(json.dumps(summary))
    return EXIT_PARTIAL if result.partial else EXIT_OK


def cmd_landscape(args) -> int:
    env = build_environment(args.fixture, _fixture_params(args), SeedSpec(args.seed))
    n = default_n(env, args.n)
    seed = SeedSpec(args.seed).substream("landscape")
    if args.mode == "grid1d":
        box = env.param_box
        lo = args.lo if args.lo is not None else (float(box[0][0]) if box else -1.0)
        hi = args.hi if args.hi is not None else (float(box[1][0]) if box else 1.0)
        grid = dr_grid_1d(env, lo, hi, args.resolution, n, seed)
    else:
        center = _vector(args.center, env.theta_dim, np.zeros(env.theta_dim))
        grid = dr_slice(env, center, args.resolution, args.alpha_lo, args.alpha_hi, n, seed, args.direction_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "landscape.csv").write_text(grid.to_csv(), encoding="utf-8", newline="\n")
    (out / "landscape.json").write_text(grid.to_json(), encoding="utf-8", newline="\n")
    at, pr = grid.diagonal_argmin()
    axis = "theta" if grid.mode == "scalar_theta" else "alpha"
    print(json.dumps({"diagonal_argmin": {axis: at, "pr": pr}, "grid_min": grid.grid_min()}))
    return EXIT_OK


def cmd_oracle(args) -> int:
    params = _merge(args.fixture, _fixture_params(args))
    pts = oracle_points(args.fixture, **params)
    print(json.dumps(pts.to_dict()))
    return EXIT_OK


def cmd_validate_grad(args) -> int:
    seed = SeedSpec(args.seed)
    env = build_environment(args.fixture, _fixture_params(args), seed)
    if env.model.is_classifier:
        fallback = env.model.init_params(seed.substream("theta0").rng())
    else:
        fallback = np.full(env.theta_dim, 0.5)
    theta_M = _vector(args.theta_M, env.theta_dim, fallback)
    theta_D = _vector(args.theta_D, env.theta_dim, theta_M)
    report = validate_gradients(
        env,
        theta_M,
        theta_D,
        default_n(env, args.n),
        seed.substream("validate"),
        tolerance=args.tolerance,
        fd_tolerance=args.fd_tolerance,
        require_analytic=args.analytic_only,
    )
    print(json.dumps(report, indent=1))
    return EXIT_OK if report["passed"] else EXIT_PARTIAL


def cmd_list_fixtures(args) -> int:
    for item in list_fixtures():
        print(json.dumps(item))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="dprisk", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a multi-seed experiment from a JSON config", formatter_class=fmt)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out", default="out", help="output directory (created if absent)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("landscape", help="sample the decoupled risk on a grid", formatter_class=fmt)
    _add_fixture_flags(p)
    p.add_argument("--mode", choices=["grid1d", "slice"], default="grid1d", help="scalar grid or random-direction slice")
    p.add_argument("--resolution", type=int, default=101, help="points per axis")
    p.add_argument("--n", type=int, default=None, help="samples per row (default 1000, or the full strategic pool)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--lo", type=float, default=None, help="grid1d lower bound (default: box)")
    p.add_argument("--hi", type=float, default=None, help="grid1d upper bound (default: box)")
    p.add_argument("--center", default=None, help="slice center, scalar or comma list (default 0)")
    p.add_argument("--alpha-lo", type=float, default=-0.5, help="slice lower bound")
    p.add_argument("--alpha-hi", type=float, default=0.5, help="slice upper bound")
    p.add_argument("--direction-seed", type=int, default=0, help="seed of the slice direction")
    p.add_argument("--out", default="out", help="output directory (created if absent)")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("oracle", help="print closed-form stable/optimal points as JSON", formatter_class=fmt)
    _add_fixture_flags(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser(
        "validate-grad",
        help="cross-check data-side gradient estimators",
        description=(
            "Compare the pathwise, score-function and finite-difference estimates of grad_D DR. "
            "The score-function check is statistical: at small --n (say 10 on a noisy mixture) it "
            "can fail by chance, and agreement tightens as --n grows."
        ),
        formatter_class=fmt,
    )
    _add_fixture_flags(p)
    p.add_argument("--n", type=int, default=None, help="sample size (default 1000, or the full strategic pool)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--tolerance", type=float, default=1e-6, help="max relative error for pathwise vs FD")
    p.add_argument("--fd-tolerance", type=float, default=1e-3, help="max relative error for FD at h vs h/2")
    p.add_argument("--theta-M", dest="theta_M", default=None, help="model parameters, scalar or comma list")
    p.add_argument("--theta-D", dest="theta_D", default=None, help="data parameters (default: theta-M)")
    p.add_argument("--analytic-only", action="store_true", help="fail if the map has no analytic Jacobian")
    p.set_defaults(func=cmd_validate_grad)

    p = sub.add_parser("list-fixtures", help="list fixture ids with their defaults", formatter_class=fmt)
    p.set_defaults(func=cmd_list_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DPRiskError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
