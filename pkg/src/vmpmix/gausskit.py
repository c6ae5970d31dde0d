"""Scalar Gaussian primitives and closed-form expectation identities.

Everything here works in the shifted parameterization x ~ N(mu, nu^2): the
loss catalog converts from its (y; m, nu) argument convention before calling
in.  All functions broadcast over numpy arrays and are pure.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

SQRT_2PI = math.sqrt(2.0 * math.pi)


def normal_pdf(x, mean, sd):
    """Gaussian density at x for N(mean, sd^2); broadcasts."""
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0.0):
        raise ValueError("sd must be positive")
    z = (np.asarray(x, dtype=float) - mean) / sd
    out = np.exp(-0.5 * z * z) / (sd * SQRT_2PI)
    return out if out.ndim else float(out)


def normal_cdf(x, mean, sd):
    """Gaussian CDF at x for N(mean, sd^2) via the complementary error function."""
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0.0):
        raise ValueError("sd must be positive")
    x = np.asarray(x, dtype=float)
    out = ndtr((x - mean) / sd)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ScalarGaussian:
    """A scalar Gaussian N(mean, sd^2), sd > 0."""

    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0.0:
            raise ValueError("sd must be positive")


def dirac_moment(c, g):
    """E{delta_0(x - c)} for x ~ g, i.e. the density of g at c."""
    return normal_pdf(c, g.mean, g.sd)


def sign_moment(g):
    """E{sign(x)} = 1 - 2*Phi(0; mean, sd^2)."""
    return 1.0 - 2.0 * normal_cdf(0.0, g.mean, g.sd)


def abs_moment(g):
    """E|x| = mu - 2*mu*Phi(0) + 2*nu^2*phi(0)."""
    mu, nu = g.mean, g.sd
    return mu - 2.0 * mu * normal_cdf(0.0, mu, nu) + 2.0 * nu * nu * normal_pdf(0.0, mu, nu)


def _cdf_at(x, mu, nu):
    if math.isinf(x):
        return 0.0 if x < 0 else 1.0
    return float(ndtr((x - mu) / nu))


def _pdf_at(x, mu, nu):
    if math.isinf(x):
        return 0.0
    z = (x - mu) / nu
    return math.exp(-0.5 * z * z) / (nu * SQRT_2PI)


def trunc_moment1(a, b, g):
    """E{x * 1_[a,b](x)}; a <= b, infinite endpoints allowed."""
    if a > b:
        raise ValueError("interval endpoints must satisfy a <= b")
    mu, nu = g.mean, g.sd
    cdf_term = _cdf_at(b, mu, nu) - _cdf_at(a, mu, nu)
    pdf_term = _pdf_at(b, mu, nu) - _pdf_at(a, mu, nu)
    return mu * cdf_term - nu * nu * pdf_term


def trunc_moment2(a, b, g):
    """E{x^2 * 1_[a,b](x)}; a <= b, infinite endpoints allowed."""
    if a > b:
        raise ValueError("interval endpoints must satisfy a <= b")
    mu, nu = g.mean, g.sd
    nu2 = nu * nu
    cdf_term = _cdf_at(b, mu, nu) - _cdf_at(a, mu, nu)
    pdf_term = _pdf_at(b, mu, nu) - _pdf_at(a, mu, nu)
    # (x - mu)*pdf(x) vanishes at infinite endpoints
    edge_b = 0.0 if math.isinf(b) else (b - mu) * _pdf_at(b, mu, nu)
    edge_a = 0.0 if math.isinf(a) else (a - mu) * _pdf_at(a, mu, nu)
    val = (mu * mu + nu2) * cdf_term - 2.0 * nu2 * mu * pdf_term - nu2 * (edge_b - edge_a)
    # the integrand is nonnegative; deep-tail cancellation can leave -1e-24
    return max(val, 0.0)


def cdf_diff(hi, lo):
    """Phi(hi) - Phi(lo) for standardized arguments hi >= lo, cancellation-safe.

    For nearly equal arguments the difference is replaced by the midpoint
    density times the gap; for same-tail arguments the complement identity
    keeps relative accuracy.
    """
    hi = np.asarray(hi, dtype=float)
    lo = np.asarray(lo, dtype=float)
    gap = hi - lo
    mid = 0.5 * (hi + lo)
    near = gap < 1e-8
    upper_tail = mid > 0.0
    direct = np.where(upper_tail, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    linear = gap * np.exp(-0.5 * mid * mid) / SQRT_2PI
    out = np.where(near, linear, direct)
    return out if out.ndim else float(out)
