"""Loss catalog: pointwise losses, weak derivatives, and their Gaussian means.

For each family the catalog provides the pointwise loss psi0(y, eta), its
first weak derivative psi1 (w.r.t. eta, midpoint convention at kinks via
sign(0) = 0), where it exists a pointwise curvature psi2, and the closed-form
expectations Psi_r(y, m, nu) = d^r/dm^r E{psi0(y, eta)} for eta ~ N(m, nu^2).

Closed forms are assembled from the shifted-parameterization identities in
:mod:`vmpmix.gausskit`; the logistic family has no closed form and integrates
by Gauss-Hermite.  Every coded expression is validated against the
kink-splitting quadrature oracle in the test suite, which is what settles the
sign and scale ambiguities among the published variants of these formulas.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .gausskit import SQRT_2PI, cdf_diff
from .quadrature import gauss_hermite_rule

FAMILIES = (
    "quantile",
    "expectile",
    "huber_regression",
    "huber_classification",
    "svr",
    "svc",
    "logistic",
)

_TAU_FAMILIES = {"quantile", "expectile"}
_EPS_FAMILIES = {"huber_regression", "huber_classification", "svr"}
_PM1_FAMILIES = {"svc", "huber_classification"}
# families whose pointwise second weak derivative is a Dirac comb
DIRAC_PSI2 = {"quantile", "svr", "svc"}

DEFAULT_QUAD_ORDER = 31


@dataclass(frozen=True)
class LossSpec:
    """A loss family with its hyperparameters.

    tau in (0,1) is required for quantile/expectile; eps > 0 for the Huber
    families and support vector regression.  Classification families expect
    responses in {-1,+1}; logistic expects {0,1}.
    """

    family: str
    tau: float = None
    eps: float = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.family in _TAU_FAMILIES:
            if self.tau is None or not 0.0 < self.tau < 1.0:
                raise ValueError("tau must lie in (0, 1) for this family")
        elif self.tau is not None:
            raise ValueError(f"tau is not a parameter of {self.family}")
        if self.family in _EPS_FAMILIES:
            if self.eps is None or not self.eps > 0.0:
                raise ValueError("eps must be positive for this family")
        elif self.eps is not None:
            raise ValueError(f"eps is not a parameter of {self.family}")


@dataclass(frozen=True)
class PsiTriple:
    """Expected loss and its first two derivatives in the predictor mean."""

    psi0: float
    psi1: float
    psi2: float


def validate_response(spec, y):
    y = np.asarray(y, dtype=float)
    if spec.family in _PM1_FAMILIES:
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError(f"{spec.family} requires responses in {{-1,+1}}")
    elif spec.family == "logistic":
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise ValueError("logistic requires responses in {0,1}")
    return y


def kink_points(spec, y):
    """Locations in eta where psi0(y, .) or a weak derivative is non-smooth."""
    y = float(y)
    fam = spec.family
    if fam in ("quantile", "expectile"):
        return (y,)
    if fam == "svc":
        return (y,)  # 1 - y*eta = 0 with y in {-1,+1}
    if fam in ("svr", "huber_regression"):
        return (y - spec.eps, y + spec.eps)
    if fam == "huber_classification":
        return (y * (1.0 - spec.eps), y * (1.0 + spec.eps))
    return ()


def loss_value(spec, y, eta):
    """Pointwise loss psi0(y, eta); broadcasts over arrays."""
    y = validate_response(spec, y)
    eta = np.asarray(eta, dtype=float)
    fam = spec.family
    if fam == "quantile":
        r = y - eta
        out = 0.5 * np.abs(r) + (spec.tau - 0.5) * r
    elif fam == "expectile":
        r = y - eta
        w = np.where(r > 0.0, spec.tau, 1.0 - spec.tau)
        out = 0.5 * r * r * w
    elif fam == "huber_regression":
        r = y - eta
        e = spec.eps
        out = np.where(np.abs(r) <= e, r * r / (2.0 * e), np.abs(r) - e / 2.0)
    elif fam == "huber_classification":
        x = 1.0 - y * eta
        e = spec.eps
        out = np.where(
            np.abs(x) <= e, (e + x) ** 2 / (4.0 * e), np.where(x > e, x, 0.0)
        )
    elif fam == "svr":
        r = y - eta
        out = 2.0 * np.maximum(0.0, np.abs(r) - spec.eps)
    elif fam == "svc":
        out = 2.0 * np.maximum(0.0, 1.0 - y * eta)
    else:  # logistic
        out = np.logaddexp(0.0, eta) - y * eta
    return out if out.ndim else float(out)


def loss_weak_grad(spec, y, eta):
    """First weak derivative of psi0 w.r.t. eta; midpoint value at kinks."""
    y = validate_response(spec, y)
    eta = np.asarray(eta, dtype=float)
    fam = spec.family
    if fam == "quantile":
        r = y - eta
        out = -0.5 * np.sign(r) - (spec.tau - 0.5)
    elif fam == "expectile":
        r = y - eta
        w = np.where(r > 0.0, spec.tau, 1.0 - spec.tau)
        out = -r * w
    elif fam == "huber_regression":
        r = y - eta
        e = spec.eps
        out = np.where(np.abs(r) <= e, -r / e, -np.sign(r))
    elif fam == "huber_classification":
        x = 1.0 - y * eta
        e = spec.eps
        out = np.where(
            np.abs(x) <= e, -y * (e + x) / (2.0 * e), np.where(x > e, -y, 0.0)
        )
    elif fam == "svr":
        r = y - eta
        out = -np.sign(r - spec.eps) - np.sign(r + spec.eps)
    elif fam == "svc":
        x = 1.0 - y * eta
        out = -y * (np.sign(x) + 1.0)
    else:  # logistic
        out = expit(eta) - y
    return out if out.ndim else float(out)


def loss_curvature(spec, y, eta):
    """Pointwise second weak derivative where it is a function.

    Deliberately absent for quantile/svr/svc, whose curvature is a Dirac
    comb: their Psi2 comes from the density identity, never from points.
    """
    if spec.family in DIRAC_PSI2:
        raise ValueError(f"{spec.family} has no pointwise curvature")
    y = validate_response(spec, y)
    eta = np.asarray(eta, dtype=float)
    fam = spec.family
    if fam == "expectile":
        r = y - eta
        out = np.where(
            r > 0.0, spec.tau, np.where(r < 0.0, 1.0 - spec.tau, 0.5)
        )
    elif fam == "huber_regression":
        r = np.abs(y - eta)
        e = spec.eps
        out = np.where(r < e, 1.0 / e, np.where(r > e, 0.0, 0.5 / e))
    elif fam == "huber_classification":
        x = np.abs(1.0 - y * eta)
        e = spec.eps
        out = np.where(x < e, 0.5 / e, np.where(x > e, 0.0, 0.25 / e))
    else:  # logistic
        p = expit(eta)
        out = p * (1.0 - p)
    return out if out.ndim else float(out)


def _std_pdf(z):
    return np.exp(-0.5 * z * z) / SQRT_2PI


def psi_vectors(spec, y, m, nu, quad_order=DEFAULT_QUAD_ORDER):
    """Vectorized (Psi0, Psi1, Psi2) over observations.

    y, m, nu are equal-length arrays; nu must be strictly positive.  This is
    the engine-facing evaluation: closed forms for the six analytic families,
    Gauss-Hermite of the pointwise derivatives for logistic.
    """
    y = validate_response(spec, np.atleast_1d(y))
    m = np.atleast_1d(np.asarray(m, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if np.any(nu <= 0.0):
        raise ValueError("nu must be positive")
    fam = spec.family

    if fam == "logistic":
        rule = gauss_hermite_rule(quad_order)
        x = m[:, None] + nu[:, None] * rule.nodes[None, :]
        p = expit(x)
        psi0 = (np.logaddexp(0.0, x) @ rule.weights) - y * m
        psi1 = (p @ rule.weights) - y
        psi2 = (p * (1.0 - p)) @ rule.weights
        return psi0, psi1, psi2

    if fam in ("quantile", "expectile", "svr", "huber_regression"):
        mu = y - m  # residual-space mean
    else:  # svc, huber_classification: margin space
        mu = 1.0 - y * m
    nu2 = nu * nu
    z = mu / nu

    if fam == "quantile":
        tau = spec.tau
        cdf0 = ndtr(-z)  # Phi(0; mu, nu^2)
        pdf0 = _std_pdf(z) / nu
        psi0 = mu * (tau - cdf0) + nu2 * pdf0
        psi1 = cdf0 - tau
        psi2 = pdf0
    elif fam == "expectile":
        tau = spec.tau
        cdf0 = ndtr(-z)
        pdf0 = _std_pdf(z) / nu
        w = tau + (1.0 - 2.0 * tau) * cdf0
        psi0 = 0.5 * (mu * mu + nu2) * w - 0.5 * (1.0 - 2.0 * tau) * mu * nu2 * pdf0
        psi1 = -mu * w + (1.0 - 2.0 * tau) * nu2 * pdf0
        psi2 = w
    elif fam == "svc":
        sf0 = ndtr(z)  # 1 - Phi(0; mu, nu^2)
        pdf0 = _std_pdf(z) / nu
        psi0 = 2.0 * (mu * sf0 + nu2 * pdf0)
        psi1 = -2.0 * y * sf0
        psi2 = 2.0 * pdf0
    elif fam == "svr":
        e = spec.eps
        hi = (e - mu) / nu
        lo = (-e - mu) / nu
        cdf_hi = ndtr(hi)        # Phi(eps; mu, nu^2)
        cdf_lo = ndtr(lo)        # Phi(-eps; mu, nu^2)
        sf_hi = ndtr(-hi)        # 1 - Phi(eps; .)
        pdf_hi = _std_pdf(hi) / nu
        pdf_lo = _std_pdf(lo) / nu
        psi0 = 2.0 * ((mu - e) * sf_hi + nu2 * pdf_hi - (mu + e) * cdf_lo + nu2 * pdf_lo)
        psi1 = 2.0 * (cdf_hi + cdf_lo - 1.0)
        psi2 = 2.0 * (pdf_hi + pdf_lo)
    else:  # huber_regression / huber_classification share the band algebra
        e = spec.eps
        hi = (e - mu) / nu
        lo = (-e - mu) / nu
        band = cdf_diff(hi, lo)  # Phi(eps;.) - Phi(-eps;.) >= 0
        cdf_hi = ndtr(hi)
        cdf_lo = ndtr(lo)
        sf_hi = ndtr(-hi)
        pdf_hi = _std_pdf(hi) / nu
        pdf_lo = _std_pdf(lo) / nu
        pdf_sum = pdf_hi + pdf_lo
        pdf_dif = pdf_hi - pdf_lo
        # E{x 1_[-e,e]}, E{x^2 1_[-e,e]} from the truncated-moment identities
        t1 = mu * band - nu2 * pdf_dif
        t2 = (mu * mu + nu2) * band - 2.0 * nu2 * mu * pdf_dif - nu2 * (
            (e - mu) * pdf_hi + (e + mu) * pdf_lo
        )
        if fam == "huber_regression":
            upper = mu * sf_hi + nu2 * pdf_hi   # E{x 1_{x>e}}
            lower = mu * cdf_lo - nu2 * pdf_lo  # E{x 1_{x<-e}}
            psi0 = t2 / (2.0 * e) + upper - lower - 0.5 * e * (sf_hi + cdf_lo)
            psi1 = -t1 / e - sf_hi + cdf_lo
            psi2 = band / e
        else:
            upper = mu * sf_hi + nu2 * pdf_hi
            psi0 = (t2 + 2.0 * e * t1 + e * e * band) / (4.0 * e) + upper
            psi1 = -y * (t1 / (2.0 * e) + 0.5 * band + sf_hi)
            psi2 = band / (2.0 * e)
    return psi0, psi1, psi2


def psi_triple(spec, y, m, nu):
    """Scalar (Psi0, Psi1, Psi2) at one (y, m, nu) point."""
    if not nu > 0.0:
        raise ValueError("nu must be positive")
    p0, p1, p2 = psi_vectors(spec, [y], [m], [nu])
    return PsiTriple(float(p0[0]), float(p1[0]), float(p2[0]))


@dataclass(frozen=True)
class LinkSpec:
    """A twice-differentiable bijective link with its first two derivatives.

    Derivative consistency is probed by central differences on a grid at
    construction; monotonicity on the probe grid stands in for bijectivity.
    """

    g: callable
    g_dot: callable
    g_ddot: callable
    probe_lo: float = -3.0
    probe_hi: float = 3.0

    def __post_init__(self):
        grid = np.linspace(self.probe_lo, self.probe_hi, 13)
        h = 1e-6 * max(1.0, self.probe_hi - self.probe_lo)
        gv = np.asarray(self.g(grid), dtype=float)
        if not (np.all(np.diff(gv) > 0) or np.all(np.diff(gv) < 0)):
            raise ValueError("link is not monotone on the probe grid")
        fd1 = (np.asarray(self.g(grid + h)) - np.asarray(self.g(grid - h))) / (2 * h)
        if not np.allclose(fd1, self.g_dot(grid), rtol=1e-6, atol=1e-6):
            raise ValueError("g_dot inconsistent with finite differences of g")
        fd2 = (np.asarray(self.g_dot(grid + h)) - np.asarray(self.g_dot(grid - h))) / (2 * h)
        if not np.allclose(fd2, self.g_ddot(grid), rtol=1e-6, atol=1e-6):
            raise ValueError("g_ddot inconsistent with finite differences of g_dot")


def _linked_kinks(spec, link, y, lo, hi):
    """Predictor-space locations where g(eta) crosses a kink of the base loss."""
    from scipy.optimize import brentq

    g_lo = float(link.g(lo))
    g_hi = float(link.g(hi))
    if not (np.isfinite(g_lo) and np.isfinite(g_hi)):
        return ()  # the integrator reports the offending node itself
    a, b = (g_lo, g_hi) if g_lo <= g_hi else (g_hi, g_lo)
    crossings = []
    for k in kink_points(spec, y):
        if a < k < b:
            crossings.append(brentq(lambda x: float(link.g(x)) - k, lo, hi, xtol=1e-13))
    return tuple(crossings)


def psi_triple_linked(spec, link, y, m, nu, nodes=61):
    """(Psi0, Psi1, Psi2) for the composed loss psi(y, g(eta)) by quadrature.

    The chain rule gives psi1 = D_g psi * g', psi2 = D_g^2 psi * g'^2 +
    D_g psi * g''.  Kinks of the base loss are pulled back through the link
    by root finding so the integrator splits at them.  Families without a
    pointwise curvature get Psi2 from a central difference of the integrated
    Psi1.
    """
    from .quadrature import EvaluationError, expect_piecewise

    if not nu > 0.0:
        raise ValueError("nu must be positive")

    def checked_g(x):
        gx = np.asarray(link.g(x), dtype=float)
        if not np.all(np.isfinite(gx)):
            bad = np.asarray(x)[~np.isfinite(gx)][0]
            raise EvaluationError(f"link not finite at node {bad!r}", node=float(bad))
        return gx

    def f0(x):
        return loss_value(spec, y, checked_g(x))

    def f1(x):
        return loss_weak_grad(spec, y, checked_g(x)) * np.asarray(link.g_dot(x), dtype=float)

    span = 8.5 * nu + 2e-4
    breaks = _linked_kinks(spec, link, y, m - span, m + span)
    psi0 = expect_piecewise(f0, m, nu, breaks, nodes)

    def psi1_at(mm):
        return expect_piecewise(f1, mm, nu, breaks, nodes)

    psi1 = psi1_at(m)
    if spec.family in DIRAC_PSI2:
        h = 1e-4 * max(1.0, nu)
        psi2 = (psi1_at(m + h) - psi1_at(m - h)) / (2.0 * h)
    else:
        def f2(x):
            gd = np.asarray(link.g_dot(x), dtype=float)
            gdd = np.asarray(link.g_ddot(x), dtype=float)
            gx = checked_g(x)
            return loss_curvature(spec, y, gx) * gd * gd + loss_weak_grad(spec, y, gx) * gdd

        psi2 = expect_piecewise(f2, m, nu, breaks, nodes)
    return PsiTriple(psi0, psi1, psi2)
