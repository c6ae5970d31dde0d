"""Stochastic minibatch variant of the message-passing engine.

Each step rescales the minibatch contributions by n/s, blends the
Inverse-Gamma rate parameters and the Gaussian natural parameters with a
Robbins-Monro learning rate, and recovers (mu, Sigma) from the blended
naturals.  With s = n and rho = 1 a step reproduces one batch iteration.
"""

import time
from dataclasses import dataclass

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
from .vmp import FitReport, initial_state


@dataclass(frozen=True)
class StochasticOptions:
    """Minibatch size, base learning rate, and run length."""

    minibatch: int = 100
    rho0: float = 0.05
    iterations: int = 10000
    seed: int = 0
    quad_order: int = 31
    elbo_every: int = 100
    fixed_rho: float = None  # overrides the schedule when set

    def __post_init__(self):
        if self.minibatch < 1 or self.rho0 <= 0 or self.iterations < 0:
            raise ValueError("invalid stochastic options")


@dataclass(frozen=True)
class NaturalParams:
    """Gaussian natural parameters lambda1 = Sigma^{-1} mu, lambda2 = -Sigma^{-1}/2."""

    lambda1: np.ndarray
    lambda2: np.ndarray

    @staticmethod
    def from_moments(gauss):
        eye = np.eye(gauss.mu.size)
        prec = cho_solve((gauss.chol, True), eye)
        prec = 0.5 * (prec + prec.T)
        return NaturalParams(lambda1=prec @ gauss.mu, lambda2=-0.5 * prec)

    def to_moments(self):
        neg2l2 = -2.0 * self.lambda2
        try:
            factor = cho_factor(0.5 * (neg2l2 + neg2l2.T), lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(
                "blended natural parameters are not negative definite",
                diagnostics={"min_diag": float(np.min(np.diagonal(neg2l2)))},
            ) from exc
        Sigma = cho_solve(factor, np.eye(self.lambda1.size))
        Sigma = 0.5 * (Sigma + Sigma.T)
        mu = cho_solve(factor, self.lambda1)
        return GaussianState(mu, Sigma)


def learning_rate(t, rho0):
    """Robbins-Monro schedule rho0 / (1 + rho0 t)^(3/4)."""
    if rho0 <= 0 or t < 0:
        raise ValueError("rho0 must be positive and t non-negative")
    return rho0 / (1.0 + rho0 * t) ** 0.75


def sample_minibatch(n, s, rng):
    """s distinct indices drawn uniformly without replacement, sorted."""
    if not 1 <= s <= n:
        raise ValueError("minibatch size must satisfy 1 <= s <= n")
    return np.sort(rng.choice(n, size=s, replace=False))


def _step_rng(seed, t):
    return np.random.Generator(np.random.Philox(key=[seed, t]))


def svmp_step(state, y, design, prior, spec, batch, t, opts):
    """One stochastic natural-gradient sweep on the given minibatch."""
    batch = np.asarray(batch, dtype=int)
    s = batch.size
    n = design.n
    if s < 1 or np.any(batch < 0) or np.any(batch >= n):
        raise ValueError("batch indices out of range")
    rho = learning_rate(t, opts.rho0) if opts.fixed_rho is None else opts.fixed_rho
    scale_up = n / s
    phi = prior.phi

    C_s = design.C[batch]
    m_s = C_s @ state.gauss.mu
    CL = C_s @ state.gauss.chol
    nu_s = np.sqrt(np.einsum("ij,ij->i", CL, CL))
    psi0, psi1, psi2 = psi_vectors(spec, y[batch], m_s, nu_s, opts.quad_order)

    beta_eps = (1.0 - rho) * state.ig_eps.beta + rho * (
        prior.B_eps + scale_up * float(np.sum(psi0)) / phi
    )
    ig_eps = InvGammaState(prior.A_eps + n / phi, beta_eps)
    ig = []
    for h in range(design.H):
        sl = design.block_slice(h)
        mu_h = state.gauss.mu[sl]
        R_h = design.R[h]
        quad = float(mu_h @ R_h @ mu_h) + float(np.sum(R_h * state.gauss.Sigma[sl, sl]))
        beta_h = (1.0 - rho) * state.ig[h].beta + rho * (prior.B[h] + 0.5 * quad)
        ig.append(InvGammaState(prior.A[h] + design.d_h[h] / 2.0, beta_h))

    rbar = assemble_rbar(prior, ig, design)
    gamma_eps = ig_eps.gamma
    g_hat = -rbar @ state.gauss.mu - scale_up * gamma_eps * (C_s.T @ psi1) / phi
    negH_hat = rbar + scale_up * gamma_eps * (C_s * psi2[:, None]).T @ C_s / phi
    negH_hat = 0.5 * (negH_hat + negH_hat.T)

    nat = NaturalParams.from_moments(state.gauss)
    lambda1 = (1.0 - rho) * nat.lambda1 + rho * (g_hat + negH_hat @ state.gauss.mu)
    lambda2 = (1.0 - rho) * nat.lambda2 + rho * (-0.5 * negH_hat)
    gauss = NaturalParams(lambda1, lambda2).to_moments()
    return VariationalState(gauss=gauss, ig_eps=ig_eps, ig=ig)


def fit_svmp(y, design, prior, spec, opts=StochasticOptions(), init=None):
    """Run exactly opts.iterations stochastic steps; no ELBO-based stopping.

    The ELBO trace is thinned: the full-data bound is evaluated every
    opts.elbo_every steps and at the final step.
    """
    y = validate_response(spec, np.asarray(y, dtype=float))
    if y.size != design.n:
        raise ValueError("response length does not match the design")
    state = initial_state(design, prior) if init is None else init

    trace = []
    t_start = time.perf_counter()
    if opts.iterations == 0:
        trace.append(full_data_elbo(y, design, prior, spec, state, opts.quad_order))
    for t in range(opts.iterations):
        rng = _step_rng(opts.seed, t)
        batch = sample_minibatch(design.n, opts.minibatch, rng)
        state = svmp_step(state, y, design, prior, spec, batch, t, opts)
        if (t + 1) % opts.elbo_every == 0 or t + 1 == opts.iterations:
            trace.append(full_data_elbo(y, design, prior, spec, state, opts.quad_order))
    wall = time.perf_counter() - t_start
    return FitReport(
        state=state,
        elbo_trace=trace,
        iterations=opts.iterations,
        converged=True,
        wall_time=wall,
        diagnostics={"alpha_eps": state.ig_eps.alpha},
    )


def full_data_elbo(y, design, prior, spec, state, quad_order=31):
    """Evidence lower bound of a state over the full dataset."""
    pm = predictor_moments(design, state.gauss)
    psi0, _, _ = psi_vectors(spec, y, pm.m, np.sqrt(pm.v2), quad_order)
    return elbo(design, prior, state, spec, psi0)
