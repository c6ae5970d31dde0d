"""Synthetic data generators, dataset directory I/O, and the experiment harness.

Generators follow the random-intercept design: covariate x ~ N(0,1), groups
assigned round-robin, fixed effects drawn N(0, 1/2), random intercepts
N(0, 1/4), and three response mechanisms (heteroscedastic Gaussian with
log-scale regression, location-scale Student t, Bernoulli through a logit).
Randomness comes from the counter-based Philox generator so every artifact
is reproducible from its seed.
"""

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .baselines import fit_mfvb_quantile, marginal_accuracies, rwm_sample
from .losses import LossSpec
from .model import DesignBlocks, PriorConfig
from .svmp import StochasticOptions, fit_svmp
from .vmp import FitOptions, fit_vmp

SIM_FAMILIES = ("heteroscedastic_gaussian", "student_t", "bernoulli")


class ParseError(ValueError):
    """A dataset file failed validation; carries file and line context."""

    def __init__(self, message, path=None, line=None):
        where = f" [{path}:{line}]" if path is not None else ""
        super().__init__(message + where)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class SimConfig:
    """Generator settings: family, sample size, group count, seed, t-model knobs."""

    family: str
    n: int
    d: int
    seed: int = 0
    sigma: float = 0.1
    dof: float = 4.0

    def __post_init__(self):
        if self.family not in SIM_FAMILIES:
            raise ValueError(f"unknown simulation family {self.family!r}")
        if not self.n >= self.d >= 1:
            raise ValueError("need n >= d >= 1")
        if self.dof <= 2:
            raise ValueError("dof must exceed 2")


@dataclass
class Dataset:
    """Response vector, design blocks, and (optionally) the generating truth."""

    y: np.ndarray
    design: DesignBlocks
    truth: dict = None


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=seed))


def simulate(cfg):
    """Draw one dataset from the configured random-intercept generator."""
    rng = _rng(cfg.seed)
    n, d = cfg.n, cfg.d
    beta = rng.normal(0.0, math.sqrt(0.5), size=2)
    gamma = rng.normal(0.0, math.sqrt(0.5), size=2)
    u = rng.normal(0.0, 0.5, size=d)
    w = rng.normal(0.0, 0.5, size=d)
    x = rng.standard_normal(n)
    groups = np.arange(n) % d
    mu = beta[0] + beta[1] * x + u[groups]
    if cfg.family == "heteroscedastic_gaussian":
        sd = np.exp(gamma[0] + gamma[1] * x + w[groups])
        y = mu + sd * rng.standard_normal(n)
    elif cfg.family == "student_t":
        y = mu + cfg.sigma * rng.standard_t(cfg.dof, size=n)
    else:
        y = (rng.random(n) < expit(mu)).astype(float)
    X = np.column_stack([np.ones(n), x])
    Z = np.zeros((n, d))
    Z[np.arange(n), groups] = 1.0
    design = DesignBlocks(X=X, Z=[Z])
    truth = {"beta": beta.tolist(), "gamma": gamma.tolist(),
             "u": u.tolist(), "w": w.tolist()}
    return Dataset(y=y, design=design, truth=truth)


def to_pm1(y):
    """Map {0,1} responses to the {-1,+1} coding used by the margin losses."""
    return 2.0 * np.asarray(y, dtype=float) - 1.0


def response_for_loss(y, spec):
    y = np.asarray(y, dtype=float)
    if spec.family in ("svc", "huber_classification") and set(np.unique(y)) <= {0.0, 1.0}:
        return to_pm1(y)
    return y


_FMT = "%.17g"


def write_dataset(dataset, path):
    """Write the dataset directory: y.csv, X.csv, Z_<h>.csv, R blocks, meta."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    design = dataset.design
    _write_csv(path / "y.csv", ["y"], dataset.y[:, None])
    _write_csv(path / "X.csv", [f"x{j + 1}" for j in range(design.p)], design.X)
    for h, Zh in enumerate(design.Z):
        _write_csv(path / f"Z_{h + 1}.csv",
                   [f"z{j + 1}" for j in range(Zh.shape[1])], Zh)
    np.savetxt(path / "R_beta.csv", design.R_beta, delimiter=",", fmt=_FMT)
    for h, Rh in enumerate(design.R):
        np.savetxt(path / f"R_{h + 1}.csv", Rh, delimiter=",", fmt=_FMT)
    meta = [f"n={design.n}", f"p={design.p}", f"H={design.H}",
            "d_h=" + ",".join(str(dh) for dh in design.d_h)]
    (path / "meta").write_text("\n".join(meta) + "\n")
    if dataset.truth is not None:
        (path / "truth.json").write_text(json.dumps(dataset.truth, indent=1))


def _write_csv(path, header, matrix):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.atleast_2d(matrix):
            writer.writerow([_FMT % v for v in row])


def _read_csv(path, expect_cols=None):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path.name, line=1) from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if expect_cols is not None and len(row) != expect_cols:
                raise ParseError(
                    f"expected {expect_cols} columns, got {len(row)}",
                    path=path.name, line=lineno,
                )
            if len(row) != len(header):
                raise ParseError(
                    f"row width {len(row)} does not match header width {len(header)}",
                    path=path.name, line=lineno,
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError("non-numeric value", path=path.name, line=lineno) from None
    return np.asarray(rows, dtype=float)


def read_dataset(path):
    """Read a dataset directory written by write_dataset; R blocks default to I."""
    path = Path(path)
    meta = {}
    meta_path = path / "meta"
    if not meta_path.exists():
        raise ParseError("missing meta file", path=str(path))
    for lineno, line in enumerate(meta_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("meta lines must be key=value", path="meta", line=lineno)
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    try:
        n, p, H = int(meta["n"]), int(meta["p"]), int(meta["H"])
        d_h = [int(v) for v in meta["d_h"].split(",") if v] if H else []
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad meta contents: {exc}", path="meta") from None
    if len(d_h) != H:
        raise ParseError("d_h list length does not match H", path="meta")

    y = _read_csv(path / "y.csv", expect_cols=1).ravel()
    X = _read_csv(path / "X.csv", expect_cols=p)
    if y.size != n:
        raise ParseError(f"y has {y.size} rows, meta says {n}", path="y.csv")
    if X.shape[0] != n:
        raise ParseError(f"X has {X.shape[0]} rows, meta says {n}", path="X.csv")
    Z, R = [], []
    for h in range(H):
        Zh = _read_csv(path / f"Z_{h + 1}.csv", expect_cols=d_h[h])
        if Zh.shape[0] != n:
            raise ParseError(
                f"Z_{h + 1} has {Zh.shape[0]} rows, meta says {n}",
                path=f"Z_{h + 1}.csv",
            )
        Z.append(Zh)
        r_path = path / f"R_{h + 1}.csv"
        R.append(np.loadtxt(r_path, delimiter=",", ndmin=2) if r_path.exists() else None)
    rb_path = path / "R_beta.csv"
    R_beta = np.loadtxt(rb_path, delimiter=",", ndmin=2) if rb_path.exists() else None
    truth_path = path / "truth.json"
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else None
    design = DesignBlocks(X=X, Z=Z, R_beta=R_beta, R=R)
    return Dataset(y=y, design=design, truth=truth)


@dataclass(frozen=True)
class ExperimentPlan:
    """Grid experiment descriptor: generator, loss, methods, sizes, seeds."""

    methods: tuple = ("vmp",)
    sim_family: str = "heteroscedastic_gaussian"
    loss_family: str = "quantile"
    tau: float = 0.9
    eps: float = None
    n_grid: tuple = (500,)
    d_grid: tuple = (10,)
    replications: int = 1
    base_seed: int = 1
    sigma2_beta: float = 1e4
    phi: float = 1.0
    max_iter: int = 500
    tol: float = 1e-6
    quad_order: int = 31
    svmp_iterations: int = 2000
    minibatch: int = 100
    rho0: float = 0.05
    oracle_draws: int = 2000
    oracle_burn: int = 500
    rwm_draws: int = 10000
    rwm_burn: int = 2000

    KNOWN_METHODS = ("vmp", "svmp", "mfvb_quantile", "rwm")

    def __post_init__(self):
        for m in self.methods:
            if m not in self.KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}")
        if "mfvb_quantile" in self.methods and self.loss_family != "quantile":
            raise ValueError("mfvb_quantile applies to the quantile loss only")


RESULT_COLUMNS = ("method", "n", "d", "seed", "elbo", "iterations",
                  "wall_time", "mean_accuracy")


def run_experiment(plan, out_dir):
    """Run the grid; write per-replication results.csv and summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = _loss_spec(plan)
    rows = []
    for cell, (n, d) in enumerate((n, d) for n in plan.n_grid for d in plan.d_grid):
        for rep in range(plan.replications):
            seed = plan.base_seed + 10_000 * cell + rep
            rows.extend(_run_cell(plan, spec, n, d, seed))
    rows.sort(key=lambda r: (r["n"], r["d"], r["seed"], r["method"]))
    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    _write_summary(rows, out_dir / "summary.csv")
    return rows


def _loss_spec(plan):
    kwargs = {}
    if plan.loss_family in ("quantile", "expectile"):
        kwargs["tau"] = plan.tau
    if plan.loss_family in ("huber_regression", "huber_classification", "svr"):
        kwargs["eps"] = plan.eps if plan.eps is not None else 0.05
    return LossSpec(plan.loss_family, **kwargs)


def _run_cell(plan, spec, n, d, seed):
    data = simulate(SimConfig(family=plan.sim_family, n=n, d=d, seed=seed))
    y = response_for_loss(data.y, spec)
    design = data.design
    prior = PriorConfig.for_design(design, sigma2_beta=plan.sigma2_beta, phi=plan.phi)
    opts = FitOptions(max_iter=plan.max_iter, tol=plan.tol, quad_order=plan.quad_order)

    oracle = None
    if "rwm" in plan.methods:
        t0 = time.perf_counter()
        oracle = rwm_sample(y, design, prior, spec, draws=plan.rwm_draws,
                            burn=plan.rwm_burn, seed=seed)
        rwm_time = time.perf_counter() - t0
    elif plan.oracle_draws > 0:
        oracle = rwm_sample(y, design, prior, spec, draws=plan.oracle_draws,
                            burn=plan.oracle_burn, seed=seed)

    rows = []
    for method in plan.methods:
        if method == "rwm":
            rows.append({"method": "rwm", "n": n, "d": d, "seed": seed,
                         "elbo": "", "iterations": plan.rwm_draws,
                         "wall_time": f"{rwm_time:.6f}", "mean_accuracy": ""})
            continue
        if method == "vmp":
            report = fit_vmp(y, design, prior, spec, opts)
            final_elbo = report.elbo_trace[-1]
        elif method == "svmp":
            sopts = StochasticOptions(minibatch=min(plan.minibatch, n),
                                      rho0=plan.rho0,
                                      iterations=plan.svmp_iterations,
                                      seed=seed, quad_order=plan.quad_order)
            report = fit_svmp(y, design, prior, spec, sopts)
            final_elbo = report.elbo_trace[-1]
        else:  # mfvb_quantile
            report = fit_mfvb_quantile(y, design, prior, spec.tau, opts)
            final_elbo = report.elbo_trace[-1]
        acc = ""
        if oracle is not None:
            scores = marginal_accuracies(report.state, oracle, design)
            acc = f"{np.mean(list(scores.values())):.4f}"
        rows.append({"method": method, "n": n, "d": d, "seed": seed,
                     "elbo": f"{final_elbo:.8f}", "iterations": report.iterations,
                     "wall_time": f"{report.wall_time:.6f}", "mean_accuracy": acc})
    return rows


def _write_summary(rows, path):
    groups = {}
    for row in rows:
        groups.setdefault((row["method"], row["n"], row["d"]), []).append(row)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "n", "d", "replications", "mean_elbo",
                         "mean_iterations", "mean_wall_time", "mean_accuracy"])
        for (method, n, d), rs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
            elbos = [float(r["elbo"]) for r in rs if r["elbo"] != ""]
            accs = [float(r["mean_accuracy"]) for r in rs if r["mean_accuracy"] != ""]
            writer.writerow([
                method, n, d, len(rs),
                f"{np.mean(elbos):.8f}" if elbos else "",
                f"{np.mean([float(r['iterations']) for r in rs]):.2f}",
                f"{np.mean([float(r['wall_time']) for r in rs]):.6f}",
                f"{np.mean(accs):.4f}" if accs else "",
            ])
