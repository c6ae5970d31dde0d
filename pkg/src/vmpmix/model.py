"""Model and variational-state data model, prior assembly, and the ELBO.

The regression model couples a fixed-effect block X (p columns) with H
random-effect blocks Z_h (d_h columns each); C = [X, Z_1, ..., Z_H] stacks
them.  The variational family is a joint Gaussian over all d* = p + sum d_h
coefficients times Inverse-Gamma factors for the loss scale and each
random-effect variance.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln


class SingularMatrixError(RuntimeError):
    """A Cholesky factorization failed; carries condition diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DesignBlocks:
    """Fixed-effect matrix, random-effect matrices, and prior structure matrices.

    R_beta and each R[h] are symmetric positive semi-definite matrices fixing
    the prior correlation structure; they default to identities.
    """

    def __init__(self, X, Z=(), R_beta=None, R=()):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.Z = [np.atleast_2d(np.asarray(Zh, dtype=float)) for Zh in Z]
        n, p = self.X.shape
        for h, Zh in enumerate(self.Z):
            if Zh.shape[0] != n:
                raise ValueError(f"Z[{h}] has {Zh.shape[0]} rows, expected {n}")
        self.R_beta = np.eye(p) if R_beta is None else np.asarray(R_beta, dtype=float)
        R = list(R)
        if not R:
            R = [None] * len(self.Z)
        if len(R) != len(self.Z):
            raise ValueError("R must have one matrix per random-effect block")
        self.R = [
            np.eye(Zh.shape[1]) if Rh is None else np.asarray(Rh, dtype=float)
            for Zh, Rh in zip(self.Z, R)
        ]
        self._check_structure(self.R_beta, p, "R_beta")
        for h, (Zh, Rh) in enumerate(zip(self.Z, self.R)):
            self._check_structure(Rh, Zh.shape[1], f"R[{h}]")
        self.C = np.hstack([self.X] + self.Z) if self.Z else self.X.copy()
        self._logdet_R_beta = None
        self._logdet_R = [None] * len(self.R)

    def logdet_R_beta(self):
        if self._logdet_R_beta is None:
            self._logdet_R_beta = _logdet_psd(self.R_beta)
        return self._logdet_R_beta

    def logdet_R(self, h):
        if self._logdet_R[h] is None:
            self._logdet_R[h] = _logdet_psd(self.R[h])
        return self._logdet_R[h]

    @staticmethod
    def _check_structure(M, dim, name):
        if M.shape != (dim, dim):
            raise ValueError(f"{name} must be {dim}x{dim}, got {M.shape}")
        if np.max(np.abs(M - M.T), initial=0.0) > 1e-12:
            raise ValueError(f"{name} is not symmetric")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def H(self):
        return len(self.Z)

    @property
    def d_h(self):
        return tuple(Zh.shape[1] for Zh in self.Z)

    @property
    def d_star(self):
        return self.p + sum(self.d_h)

    def block_slice(self, h):
        """Column slice of block h in C (h = -1 for the fixed effects)."""
        if h == -1:
            return slice(0, self.p)
        start = self.p + sum(self.d_h[:h])
        return slice(start, start + self.d_h[h])


@dataclass(frozen=True)
class PriorConfig:
    """Prior constants: beta scale, Inverse-Gamma shapes/rates, temperature."""

    sigma2_beta: float = 1e6
    A_eps: float = 2.0001
    B_eps: float = 1.0001
    A: tuple = ()
    B: tuple = ()
    phi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "A", tuple(float(a) for a in self.A))
        object.__setattr__(self, "B", tuple(float(b) for b in self.B))
        if len(self.A) != len(self.B):
            raise ValueError("A and B must have equal length")
        if self.sigma2_beta <= 0 or self.A_eps <= 0 or self.B_eps <= 0 or self.phi <= 0:
            raise ValueError("prior constants must be positive")
        if any(a <= 0 for a in self.A) or any(b <= 0 for b in self.B):
            raise ValueError("prior constants must be positive")

    @staticmethod
    def for_design(design, sigma2_beta=1e6, A_eps=2.0001, B_eps=1.0001,
                   A_u=2.0001, B_u=1.0001, phi=1.0):
        """Prior with one (A_u, B_u) pair per random-effect block."""
        H = design.H
        return PriorConfig(sigma2_beta, A_eps, B_eps, (A_u,) * H, (B_u,) * H, phi)


class GaussianState:
    """Gaussian block N(mu, Sigma) with its lower Cholesky factor alongside."""

    def __init__(self, mu, Sigma, chol=None):
        self.mu = np.atleast_1d(np.asarray(mu, dtype=float))
        self.Sigma = np.asarray(Sigma, dtype=float)
        d = self.mu.size
        if self.Sigma.shape != (d, d):
            raise ValueError("Sigma shape inconsistent with mu")
        if np.max(np.abs(self.Sigma - self.Sigma.T), initial=0.0) > 1e-10:
            raise ValueError("Sigma is not symmetric")
        if chol is None:
            try:
                chol = np.linalg.cholesky(self.Sigma)
            except np.linalg.LinAlgError as exc:
                raise SingularMatrixError("Sigma is not positive definite") from exc
        self.chol = chol

    @property
    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diagonal(self.chol))))


@dataclass(frozen=True)
class InvGammaState:
    """Inverse-Gamma variational factor IG(alpha, beta)."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")

    @property
    def gamma(self):
        """E_q(1/sigma^2) = alpha/beta."""
        return self.alpha / self.beta


@dataclass
class VariationalState:
    """Full product state: Gaussian block plus Inverse-Gamma factors."""

    gauss: GaussianState
    ig_eps: InvGammaState
    ig: list = field(default_factory=list)


@dataclass(frozen=True)
class PredictorMoments:
    """Per-observation predictor mean and variance under the Gaussian block."""

    m: np.ndarray
    v2: np.ndarray


def predictor_moments(design, gauss, work=None):
    """m_i = c_i' mu and nu_i^2 = c_i' Sigma c_i, via the Cholesky factor.

    ``work`` is an optional (n, d*) scratch buffer reused across calls to
    avoid re-allocating the large intermediate product.
    """
    C = design.C
    if gauss.mu.size != design.d_star:
        raise ValueError("state dimension does not match the design")
    m = C @ gauss.mu
    if work is not None and work.shape == C.shape:
        CL = np.dot(C, gauss.chol, out=work)
    else:
        CL = C @ gauss.chol
    v2 = np.einsum("ij,ij->i", CL, CL)
    return PredictorMoments(m=m, v2=v2)


def assemble_rbar(prior, ig, design):
    """Block-diagonal prior precision: sigma_beta^{-2} R_beta and gamma_h R_h."""
    if len(ig) != design.H:
        raise ValueError("need one Inverse-Gamma state per random-effect block")
    d = design.d_star
    out = np.zeros((d, d))
    sl = design.block_slice(-1)
    out[sl, sl] = design.R_beta / prior.sigma2_beta
    for h in range(design.H):
        sl = design.block_slice(h)
        out[sl, sl] = ig[h].gamma * design.R[h]
    return out


def kl_gaussian_to_prior(gauss, rbar, prior, ig, design):
    """Expected log prior-to-q ratio for the Gaussian block.

    Includes the E_q log sigma_h^2 terms, so with H = 0 and q equal to the
    prior the value is exactly zero.
    """
    p = design.p
    d = sum(design.d_h)
    quad = float(gauss.mu @ rbar @ gauss.mu)
    trace = float(np.sum(rbar * gauss.Sigma))
    val = (
        -0.5 * (p * math.log(prior.sigma2_beta) - design.logdet_R_beta())
        + 0.5 * gauss.logdet
        - 0.5 * (quad + trace)
        + 0.5 * (p + d)
    )
    for h in range(design.H):
        e_log_sigma2 = math.log(ig[h].beta) - digamma(ig[h].alpha)
        val -= 0.5 * (design.d_h[h] * e_log_sigma2 - design.logdet_R(h))
    return val


def _logdet_psd(M):
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("structure matrix is singular") from exc
    return 2.0 * float(np.sum(np.log(np.diagonal(L))))


def kl_invgamma(q, A, B, extra_shape):
    """Expected log prior-to-q ratio for an IG factor whose shape is A + extra.

    Evaluates A log(B/beta) - log{Gamma(A)/Gamma(alpha)} - extra*digamma(alpha)
    - (B - beta) gamma; this equals minus the KL divergence to IG(A, B)
    whenever q.alpha == A + extra_shape, and is zero at q = (A, B), extra = 0.
    """
    if A <= 0 or B <= 0:
        raise ValueError("prior parameters must be positive")
    return (
        A * math.log(B / q.beta)
        + gammaln(q.alpha)
        - gammaln(A)
        - extra_shape * digamma(q.alpha)
        - (B - q.beta) * q.gamma
    )


def elbo(design, prior, state, spec, psi0):
    """Evidence lower bound, evaluated exactly as written.

    psi0 is the vector of expected losses at the current predictor moments;
    the Inverse-Gamma beta parameters are taken from the state whether or not
    they satisfy their fixed-point equations.
    """
    psi0 = np.asarray(psi0, dtype=float)
    n = design.n
    if psi0.size != n:
        raise ValueError("psi0 must have one entry per observation")
    phi = prior.phi
    p = design.p
    d = sum(design.d_h)
    gamma_eps = state.ig_eps.gamma
    rbar = assemble_rbar(prior, state.ig, design)
    quad = float(state.gauss.mu @ rbar @ state.gauss.mu)
    trace = float(np.sum(rbar * state.gauss.Sigma))

    val = (
        -gamma_eps * float(np.sum(psi0)) / phi
        + 0.5 * state.gauss.logdet
        - 0.5 * quad
        - 0.5 * trace
        - 0.5 * p * math.log(prior.sigma2_beta)
        + 0.5 * (p + d)
        + 0.5 * design.logdet_R_beta()
        + gammaln(prior.A_eps + n / phi)
        - gammaln(prior.A_eps)
        + prior.A_eps * math.log(prior.B_eps / state.ig_eps.beta)
        - (n / phi) * math.log(state.ig_eps.beta)
        - (prior.B_eps - state.ig_eps.beta) * gamma_eps
    )
    for h in range(design.H):
        d_h = design.d_h[h]
        igh = state.ig[h]
        val += (
            0.5 * design.logdet_R(h)
            + gammaln(prior.A[h] + d_h / 2.0)
            - gammaln(prior.A[h])
            + prior.A[h] * math.log(prior.B[h] / igh.beta)
            - (d_h / 2.0) * math.log(igh.beta)
            - (prior.B[h] - igh.beta) * igh.gamma
        )
    return float(val)
