"""Batch non-conjugate variational message passing.

One outer iteration evaluates the Psi vectors at the current Gaussian state,
refreshes the Inverse-Gamma factors from their fixed-point formulas, records
the evidence lower bound of that intermediate state, and then takes one full
Newton-like natural-gradient step on the Gaussian block:

    g = -Rbar mu - gamma_eps C' Psi1 / phi
    H = -Rbar     - gamma_eps C' diag(Psi2) C / phi
    Sigma <- -H^{-1},  mu <- mu - H^{-1} g

Convergence is declared when the relative change of consecutive recorded
ELBO values falls below the tolerance.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .losses import psi_vectors, validate_response
from .model import (
    GaussianState,
    InvGammaState,
    SingularMatrixError,
    VariationalState,
    assemble_rbar,
    elbo,
    predictor_moments,
)

_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


@dataclass(frozen=True)
class FitOptions:
    """Convergence control: relative-ELBO tolerance and iteration cap."""

    max_iter: int = 500
    tol: float = 1e-6
    quad_order: int = 31
    seed: int = 0
    jitter: float = 0.0

    def __post_init__(self):
        if self.max_iter < 1 or not self.tol > 0 or self.jitter < 0:
            raise ValueError("invalid fit options")


@dataclass
class FitReport:
    """Outcome of a fit: final state, ELBO trace, and run diagnostics."""

    state: VariationalState
    elbo_trace: list
    iterations: int
    converged: bool
    wall_time: float
    diagnostics: dict = field(default_factory=dict)
    iter_times: list = field(default_factory=list)


def update_sigma_eps(prior, n, psi0_sum):
    """IG update for the loss scale: alpha = A + n/phi, beta = B + sum(Psi0)/phi."""
    return InvGammaState(prior.A_eps + n / prior.phi, prior.B_eps + psi0_sum / prior.phi)


def update_sigma_h(prior, h, gauss, design):
    """IG update for random-effect variance h from the current Gaussian block."""
    if not 0 <= h < design.H:
        raise ValueError(f"block index {h} out of range")
    sl = design.block_slice(h)
    mu_h = gauss.mu[sl]
    R_h = design.R[h]
    quad = float(mu_h @ R_h @ mu_h)
    trace = float(np.sum(R_h * gauss.Sigma[sl, sl]))
    return InvGammaState(prior.A[h] + design.d_h[h] / 2.0, prior.B[h] + 0.5 * (quad + trace))


def gauss_objective(design, prior, gauss, rbar, gamma_eps, spec, y, quad_order,
                    pm=None, psis=None, work=None):
    """The ELBO terms that depend on the Gaussian block only.

    Used to guard the natural-gradient step: the Inverse-Gamma contributions
    are constant during that step, so a rise here is a rise of the full bound.
    Returns (value, pm, psis) so callers can reuse the loss evaluation.
    """
    if pm is None:
        pm = predictor_moments(design, gauss, work)
    if psis is None:
        psis = psi_vectors(spec, y, pm.m, np.sqrt(pm.v2), quad_order)
    quad = float(gauss.mu @ rbar @ gauss.mu)
    trace = float(np.sum(rbar * gauss.Sigma))
    value = (
        -gamma_eps * float(np.sum(psis[0])) / prior.phi
        + 0.5 * gauss.logdet
        - 0.5 * (quad + trace)
    )
    return value, pm, psis


def _chol_with_jitter(neg_H, jitter0):
    """Cholesky of -H, escalating a diagonal jitter by 10x up to 1e-4."""
    jitter = 0.0
    attempt = neg_H
    while True:
        try:
            return cho_factor(attempt, lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = max(jitter0, _JITTER_START) if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX:
                diag = np.diagonal(neg_H)
                raise SingularMatrixError(
                    "negated Hessian not positive definite after jitter escalation",
                    diagnostics={
                        "min_diag": float(np.min(diag)),
                        "max_diag": float(np.max(diag)),
                        "last_jitter": jitter / 10.0,
                    },
                )
            attempt = neg_H + jitter * np.eye(neg_H.shape[0])


def gauss_step(design, prior, state, psi1, psi2, rbar, jitter=0.0, work=None):
    """One natural-gradient update of the Gaussian block (full Newton-like step)."""
    psi1 = np.asarray(psi1, dtype=float)
    psi2 = np.asarray(psi2, dtype=float)
    C = design.C
    scale = state.ig_eps.gamma / prior.phi
    if work is not None and work.shape == C.shape:
        weighted = np.multiply(C, psi2[:, None], out=work)
    else:
        weighted = C * psi2[:, None]
    neg_H = rbar + scale * (weighted.T @ C)
    neg_H = 0.5 * (neg_H + neg_H.T)
    g = -rbar @ state.gauss.mu - scale * (C.T @ psi1)
    factor, used_jitter = _chol_with_jitter(neg_H, jitter)
    Sigma = cho_solve(factor, np.eye(design.d_star))
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = state.gauss.mu + cho_solve(factor, g)
    gauss = GaussianState(mu, Sigma)
    gauss._last_jitter = used_jitter
    return gauss


_MAX_HALVINGS = 40


def guarded_gauss_step(design, prior, state, psi1, psi2, rbar, spec, y,
                       quad_order, jitter=0.0, pm=None, psis=None, work=None):
    """Natural-gradient step with a backtracking guard.

    The full step is taken whenever it does not decrease the Gaussian-block
    objective.  Otherwise the new natural parameters are blended toward the
    old ones with a halving factor until the objective stops dropping; the
    blend of two PD precision matrices stays PD, so every trial is a valid
    state.  Returns (gauss, halvings, pm_new, psis_new) with the accepted
    state's predictor moments and loss vectors for reuse.
    """
    candidate = gauss_step(design, prior, state, psi1, psi2, rbar, jitter, work)
    gamma_eps = state.ig_eps.gamma
    f_old, _, _ = gauss_objective(
        design, prior, state.gauss, rbar, gamma_eps, spec, y, quad_order, pm, psis, work
    )
    slack = 1e-8 * (1.0 + abs(f_old))
    f_new, pm_new, psis_new = gauss_objective(
        design, prior, candidate, rbar, gamma_eps, spec, y, quad_order, work=work
    )
    if np.isfinite(f_new) and f_new >= f_old - slack:
        return candidate, 0, pm_new, psis_new

    eye = np.eye(design.d_star)
    prec_old = cho_solve((state.gauss.chol, True), eye)
    lam1_old = prec_old @ state.gauss.mu
    prec_new = cho_solve((candidate.chol, True), eye)
    lam1_new = prec_new @ candidate.mu
    rho = 1.0
    for halvings in range(1, _MAX_HALVINGS + 1):
        rho *= 0.5
        prec = (1.0 - rho) * prec_old + rho * prec_new
        prec = 0.5 * (prec + prec.T)
        factor = cho_factor(prec, lower=True)
        Sigma = cho_solve(factor, eye)
        Sigma = 0.5 * (Sigma + Sigma.T)
        mu = cho_solve(factor, (1.0 - rho) * lam1_old + rho * lam1_new)
        trial = GaussianState(mu, Sigma)
        f_trial, pm_t, psis_t = gauss_objective(
            design, prior, trial, rbar, gamma_eps, spec, y, quad_order, work=work
        )
        if np.isfinite(f_trial) and f_trial >= f_old - slack:
            trial._last_jitter = getattr(candidate, "_last_jitter", 0.0)
            return trial, halvings, pm_t, psis_t
    # keep the current block; flagged upstream
    return state.gauss, _MAX_HALVINGS, None, None


def initial_state(design, prior):
    """Prior-consistent start: mu = 0, Sigma from prior-mean precisions."""
    ig_eps = InvGammaState(prior.A_eps, prior.B_eps)
    ig = [InvGammaState(prior.A[h], prior.B[h]) for h in range(design.H)]
    rbar0 = assemble_rbar(prior, ig, design)
    factor, _ = _chol_with_jitter(rbar0, 0.0)
    Sigma0 = cho_solve(factor, np.eye(design.d_star))
    Sigma0 = 0.5 * (Sigma0 + Sigma0.T)
    gauss = GaussianState(np.zeros(design.d_star), Sigma0)
    return VariationalState(gauss=gauss, ig_eps=ig_eps, ig=ig)


def fit_vmp(y, design, prior, spec, opts=FitOptions(), init=None):
    """Run the batch message-passing loop until the ELBO stabilizes.

    Returns a FitReport whose state pairs the last Gaussian block with the
    Inverse-Gamma factors refreshed from it; the recorded ELBO is exact for
    that state.
    """
    y = validate_response(spec, np.asarray(y, dtype=float))
    if y.size != design.n:
        raise ValueError("response length does not match the design")
    state = initial_state(design, prior) if init is None else init

    trace = []
    iter_times = []
    converged = False
    mono_violations = 0
    max_drop = 0.0
    damped_steps = 0
    stalled_steps = 0
    pm = None
    psis = None
    work = np.empty_like(design.C)
    t_start = time.perf_counter()
    for iteration in range(1, opts.max_iter + 1):
        t0 = time.perf_counter()
        if pm is None:
            pm = predictor_moments(design, state.gauss, work)
            psis = psi_vectors(spec, y, pm.m, np.sqrt(pm.v2), opts.quad_order)
        psi0, psi1, psi2 = psis
        ig_eps = update_sigma_eps(prior, design.n, float(np.sum(psi0)))
        ig = [update_sigma_h(prior, h, state.gauss, design) for h in range(design.H)]
        state = VariationalState(gauss=state.gauss, ig_eps=ig_eps, ig=ig)
        rbar = assemble_rbar(prior, ig, design)

        value = elbo(design, prior, state, spec, psi0)
        if not np.isfinite(value):
            raise FloatingPointError(f"ELBO not finite at iteration {iteration}")
        if trace:
            drop = trace[-1] - value
            if drop > 1e-8 * max(1.0, abs(value)):
                mono_violations += 1
                max_drop = max(max_drop, drop)
        trace.append(value)

        if len(trace) >= 2 and _relative_change(trace[-1], trace[-2]) < opts.tol:
            converged = True
            iter_times.append(time.perf_counter() - t0)
            break

        gauss, halvings, pm, psis = guarded_gauss_step(
            design, prior, state, psi1, psi2, rbar, spec, y, opts.quad_order,
            opts.jitter, pm, psis, work,
        )
        state.gauss = gauss
        if halvings:
            damped_steps += 1
        if halvings >= _MAX_HALVINGS:
            stalled_steps += 1
        iter_times.append(time.perf_counter() - t0)

    wall = time.perf_counter() - t_start
    diagnostics = {
        "monotone_violations": float(mono_violations),
        "max_elbo_drop": float(max_drop),
        "damped_steps": float(damped_steps),
        "stalled_steps": float(stalled_steps),
        "alpha_eps": state.ig_eps.alpha,
        "final_jitter": float(getattr(state.gauss, "_last_jitter", 0.0)),
    }
    return FitReport(
        state=state,
        elbo_trace=trace,
        iterations=len(trace),
        converged=converged,
        wall_time=wall,
        diagnostics=diagnostics,
        iter_times=iter_times,
    )


def _relative_change(new, old):
    if old == 0.0:
        return abs(new - old)
    return abs(new / old - 1.0)
