"""Command-line entry point: fit, simulate, psi, compare, version.

All commands are batch-style and reproducible from --seed.  A flat JSON
config file can supply any flag value; explicit flags win.  Exit codes:
0 success (fit converged), 2 fit stopped at the iteration cap, 1 any error.
"""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import fit_mfvb_quantile, marginal_accuracies, rwm_sample
from .losses import LossSpec
from .model import PriorConfig
from .quadrature import expect_piecewise, psi_triple_quadrature
from .simlab import (
    Dataset,
    SimConfig,
    read_dataset,
    response_for_loss,
    simulate,
    write_dataset,
)
from .svmp import StochasticOptions, fit_svmp
from .vmp import FitOptions, fit_vmp

SCHEMA_VERSION = 1


def _common_flags(parser):
    parser.add_argument("--config", type=str, default=None, help="flat JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--quad-order", dest="quad_order", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="vmpmix")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model to a dataset directory")
    _common_flags(p_fit)
    p_fit.add_argument("--data", type=str, default=None, required=False)
    p_fit.add_argument("--loss", type=str, default=None)
    p_fit.add_argument("--tau", type=float, default=None)
    p_fit.add_argument("--eps", type=float, default=None)
    p_fit.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p_fit.add_argument("--tol", type=float, default=None)
    p_fit.add_argument("--sigma2-beta", dest="sigma2_beta", type=float, default=None)
    p_fit.add_argument("--a-eps", dest="a_eps", type=float, default=None)
    p_fit.add_argument("--b-eps", dest="b_eps", type=float, default=None)
    p_fit.add_argument("--a-u", dest="a_u", type=float, default=None)
    p_fit.add_argument("--b-u", dest="b_u", type=float, default=None)
    p_fit.add_argument("--phi", type=float, default=None)
    p_fit.add_argument("--stochastic", action="store_true", default=None)
    p_fit.add_argument("--minibatch", type=int, default=None)
    p_fit.add_argument("--rho0", type=float, default=None)
    p_fit.add_argument("--iters", type=int, default=None)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    _common_flags(p_sim)
    p_sim.add_argument("--family", type=str, default=None)
    p_sim.add_argument("--n", type=int, default=None)
    p_sim.add_argument("--d", type=int, default=None)
    p_sim.add_argument("--sigma", type=float, default=None)
    p_sim.add_argument("--dof", type=float, default=None)
    p_sim.add_argument("--with-truth", dest="with_truth", action="store_true", default=None)

    p_psi = sub.add_parser("psi", help="tabulate closed-form vs quadrature loss means")
    _common_flags(p_psi)
    p_psi.add_argument("--loss", type=str, default=None)
    p_psi.add_argument("--tau", type=float, default=None)
    p_psi.add_argument("--eps", type=float, default=None)
    p_psi.add_argument("--y", type=str, default=None, help="comma-separated responses")
    p_psi.add_argument("--m", type=str, default=None, help="comma-separated means")
    p_psi.add_argument("--nu", type=str, default=None, help="comma-separated sds")

    p_cmp = sub.add_parser("compare", help="run several methods on one dataset")
    _common_flags(p_cmp)
    p_cmp.add_argument("--data", type=str, default=None)
    p_cmp.add_argument("--loss", type=str, default=None)
    p_cmp.add_argument("--tau", type=float, default=None)
    p_cmp.add_argument("--eps", type=float, default=None)
    p_cmp.add_argument("--methods", type=str, default=None, help="comma list: vmp,svmp,mfvb,rwm")
    p_cmp.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p_cmp.add_argument("--tol", type=float, default=None)
    p_cmp.add_argument("--sigma2-beta", dest="sigma2_beta", type=float, default=None)
    p_cmp.add_argument("--phi", type=float, default=None)
    p_cmp.add_argument("--minibatch", type=int, default=None)
    p_cmp.add_argument("--rho0", type=float, default=None)
    p_cmp.add_argument("--iters", type=int, default=None)
    p_cmp.add_argument("--draws", type=int, default=None)
    p_cmp.add_argument("--burn", type=int, default=None)

    p_ver = sub.add_parser("version", help="print the package version")
    _common_flags(p_ver)
    return parser


_DEFAULTS = {
    "seed": 0, "quad_order": 31, "out": ".",
    "loss": "quantile", "tau": None, "eps": None,
    "max_iter": 500, "tol": 1e-6,
    "sigma2_beta": 1e6, "a_eps": 2.0001, "b_eps": 1.0001,
    "a_u": 2.0001, "b_u": 1.0001, "phi": 1.0,
    "stochastic": False, "minibatch": 100, "rho0": 0.05, "iters": 10000,
    "family": "heteroscedastic_gaussian", "n": 500, "d": 10,
    "sigma": 0.1, "dof": 4.0, "with_truth": False,
    "y": None, "m": None, "nu": None,
    "methods": "vmp,rwm", "draws": 10000, "burn": 2000,
    "data": None, "config": None,
}


def resolve_options(args):
    """Merge flag values over config-file values over defaults."""
    ns = vars(args).copy()
    ns.pop("command", None)
    config = {}
    if ns.get("config"):
        with open(ns["config"]) as fh:
            config = json.load(fh)
        unknown = set(config) - set(_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = {}
    for key in set(ns) | set(config) | set(_DEFAULTS):
        if ns.get(key) is not None:
            merged[key] = ns[key]
        elif key in config:
            merged[key] = config[key]
        else:
            merged[key] = _DEFAULTS.get(key)
    return merged


def _loss_spec(opts):
    family = opts["loss"]
    if family == "mfvb":
        raise ValueError("mfvb is a method, not a loss family")
    kwargs = {}
    if family in ("quantile", "expectile"):
        kwargs["tau"] = opts["tau"] if opts["tau"] is not None else 0.5
    if family in ("huber_regression", "huber_classification", "svr"):
        kwargs["eps"] = opts["eps"] if opts["eps"] is not None else 0.05
    return LossSpec(family, **kwargs)


def _prior_for(design, opts):
    return PriorConfig.for_design(
        design,
        sigma2_beta=opts["sigma2_beta"],
        A_eps=opts["a_eps"], B_eps=opts["b_eps"],
        A_u=opts["a_u"], B_u=opts["b_u"],
        phi=opts["phi"],
    )


def cmd_fit(opts):
    if not opts["data"]:
        raise ValueError("fit requires --data")
    dataset = read_dataset(opts["data"])
    spec = _loss_spec(opts)
    y = response_for_loss(dataset.y, spec)
    prior = _prior_for(dataset.design, opts)
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if opts["stochastic"]:
        sopts = StochasticOptions(
            minibatch=min(opts["minibatch"], dataset.design.n),
            rho0=opts["rho0"], iterations=opts["iters"],
            seed=opts["seed"], quad_order=opts["quad_order"],
        )
        report = fit_svmp(y, dataset.design, prior, spec, sopts)
    else:
        fopts = FitOptions(max_iter=opts["max_iter"], tol=opts["tol"],
                           quad_order=opts["quad_order"], seed=opts["seed"])
        report = fit_vmp(y, dataset.design, prior, spec, fopts)

    _write_report(report, dataset.design, spec, opts, out_dir)
    return 0 if report.converged else 2


def _write_report(report, design, spec, opts, out_dir):
    from .baselines import param_names

    names = param_names(design)[:design.d_star]
    sds = np.sqrt(np.diagonal(report.state.gauss.Sigma))
    payload = {
        "schema_version": SCHEMA_VERSION,
        "loss": {"family": spec.family, "tau": spec.tau, "eps": spec.eps},
        "converged": bool(report.converged),
        "iterations": int(report.iterations),
        "final_elbo": float(report.elbo_trace[-1]) if report.elbo_trace else None,
        "wall_time": float(report.wall_time),
        "seed": opts["seed"],
        "posterior": {
            "names": list(names),
            "mean": [float(v) for v in report.state.gauss.mu],
            "sd": [float(v) for v in sds],
        },
        "ig": {
            "eps": {"alpha": report.state.ig_eps.alpha, "beta": report.state.ig_eps.beta},
            "groups": [{"alpha": ig.alpha, "beta": ig.beta} for ig in report.state.ig],
        },
        "diagnostics": report.diagnostics,
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=1))
    with open(out_dir / "elbo_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "elbo"])
        for i, v in enumerate(report.elbo_trace, start=1):
            writer.writerow([i, f"{v:.12g}"])


def cmd_simulate(opts):
    cfg = SimConfig(family=opts["family"], n=opts["n"], d=opts["d"],
                    seed=opts["seed"], sigma=opts["sigma"], dof=opts["dof"])
    dataset = simulate(cfg)
    if not opts["with_truth"]:
        dataset = Dataset(y=dataset.y, design=dataset.design, truth=None)
    out_dir = Path(opts["out"])
    write_dataset(dataset, out_dir)
    if opts["with_truth"]:
        print(json.dumps(dataset.truth))
    return 0


PSI_HEADER = "y,m,nu,psi0,psi1,psi2,psi0_quad,psi1_quad,psi2_fd"


def cmd_psi(opts):
    spec = _loss_spec(opts)
    if opts["y"] is not None:
        ys = [float(v) for v in str(opts["y"]).split(",")]
    elif spec.family in ("svc", "huber_classification"):
        ys = [-1.0, 1.0]
    elif spec.family == "logistic":
        ys = [0.0, 1.0]
    else:
        ys = [-2.0, 0.0, 2.0]
    ms = [float(v) for v in str(opts["m"]).split(",")] if opts["m"] else list(np.arange(-3.0, 4.0))
    nus = [float(v) for v in str(opts["nu"]).split(",")] if opts["nu"] else [0.1, 1.0, 3.0]

    from .losses import psi_vectors

    oracle_order = max(opts["quad_order"], 61)
    print(PSI_HEADER)
    for y in ys:
        for m in ms:
            for nu in nus:
                p0, p1, p2 = psi_vectors(spec, [y], [m], [nu], opts["quad_order"])
                quad = psi_triple_quadrature(spec, y, m, nu, oracle_order)
                row = [y, m, nu, float(p0[0]), float(p1[0]), float(p2[0]),
                       quad.psi0, quad.psi1, _psi2_fd(spec, y, m, nu, oracle_order)]
                print(",".join(f"{v:.10g}" for v in row))
    return 0


def _psi2_fd(spec, y, m, nu, order):
    from .losses import kink_points, loss_weak_grad

    h = 1e-4 * max(1.0, nu)
    breaks = kink_points(spec, y)
    hi = expect_piecewise(lambda x: loss_weak_grad(spec, y, x), m + h, nu, breaks, order)
    lo = expect_piecewise(lambda x: loss_weak_grad(spec, y, x), m - h, nu, breaks, order)
    return (hi - lo) / (2.0 * h)


COMPARE_HEADER = ("method", "iterations", "wall_time", "elbo", "mean_accuracy")


def cmd_compare(opts):
    if not opts["data"]:
        raise ValueError("compare requires --data")
    dataset = read_dataset(opts["data"])
    spec = _loss_spec(opts)
    y = response_for_loss(dataset.y, spec)
    design = dataset.design
    prior = _prior_for(design, opts)
    methods = [m.strip() for m in str(opts["methods"]).split(",") if m.strip()]
    for m in methods:
        if m not in ("vmp", "svmp", "mfvb", "rwm"):
            raise ValueError(f"unknown method {m!r}")
    if "mfvb" in methods and spec.family != "quantile":
        raise ValueError("mfvb baseline is defined for the quantile loss only")

    fopts = FitOptions(max_iter=opts["max_iter"], tol=opts["tol"],
                       quad_order=opts["quad_order"], seed=opts["seed"])
    oracle = None
    rwm_time = None
    if "rwm" in methods:
        t0 = time.perf_counter()
        oracle = rwm_sample(y, design, prior, spec, draws=opts["draws"],
                            burn=opts["burn"], seed=opts["seed"])
        rwm_time = time.perf_counter() - t0

    rows = []
    for method in methods:
        if method == "rwm":
            rows.append(["rwm", opts["draws"], f"{rwm_time:.6f}", "", ""])
            continue
        if method == "vmp":
            report = fit_vmp(y, design, prior, spec, fopts)
        elif method == "svmp":
            sopts = StochasticOptions(minibatch=min(opts["minibatch"], design.n),
                                      rho0=opts["rho0"], iterations=opts["iters"],
                                      seed=opts["seed"], quad_order=opts["quad_order"])
            report = fit_svmp(y, design, prior, spec, sopts)
        else:
            report = fit_mfvb_quantile(y, design, prior, spec.tau, fopts)
        acc = ""
        if oracle is not None:
            scores = marginal_accuracies(report.state, oracle, design)
            acc = f"{np.mean(list(scores.values())):.4f}"
        rows.append([method, report.iterations, f"{report.wall_time:.6f}",
                     f"{report.elbo_trace[-1]:.8f}", acc])

    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_HEADER)
        writer.writerows(rows)
    for row in rows:
        print(",".join(str(v) for v in row))
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        if args.command == "version":
            print(__version__)
            return 0
        handler = {"fit": cmd_fit, "simulate": cmd_simulate,
                   "psi": cmd_psi, "compare": cmd_compare}[args.command]
        return handler(opts)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line diagnostic, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
