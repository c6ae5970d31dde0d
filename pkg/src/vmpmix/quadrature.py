"""Gaussian expectation engines.

Two integrators live here:

* ``agh_expect`` — Gauss-Hermite in the probabilists' normalization, shifted
  and scaled exactly by the target (m, nu).  Weights sum to one, so a rule
  reads as a discrete Gaussian measure.  This is the production integrator
  for smooth losses (logistic).

* ``expect_piecewise`` — Gauss-Legendre applied between user-supplied break
  points of the integrand, with the Gaussian density folded into the weight.
  Kinked and piecewise-constant integrands (check losses, hinges, weak
  derivatives) are smooth between their breaks, so this converges to machine
  precision where a raw Hermite rule stalls at 1e-2.  It backs the
  independent oracle ``psi_triple_quadrature``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_hermitenorm

from .gausskit import SQRT_2PI


class EvaluationError(RuntimeError):
    """An integrand returned a non-finite value; carries the offending node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights integrating the standard Gaussian measure to exactly 1."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def __post_init__(self):
        if len(self.nodes) != len(self.weights) or self.order < 1:
            raise ValueError("inconsistent rule")


@lru_cache(maxsize=128)
def gauss_hermite_rule(order):
    """Probabilists' Gauss-Hermite rule of the given order (Golub-Welsch).

    scipy's Hermite roots carry the Golub-Welsch computation with tail-safe
    weights; the squared-first-eigenvector route underflows to exact zeros
    beyond ~14 sigma at order 61.  Weights are renormalized to sum to one so
    the rule reads as a discrete Gaussian measure.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if order == 1:
        return QuadratureRule(np.zeros(1), np.ones(1), 1)
    nodes, weights = roots_hermitenorm(order)
    # enforce exact symmetry of the +/- node pairs
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return QuadratureRule(nodes, weights, order)


def agh_expect(f, m, nu, order):
    """E{f(x)} for x ~ N(m, nu^2) by the shifted/scaled Gauss-Hermite rule."""
    if not nu > 0.0:
        raise ValueError("nu must be positive")
    rule = gauss_hermite_rule(order)
    x = m + nu * rule.nodes
    fx = np.asarray(f(x), dtype=float)
    if not np.all(np.isfinite(fx)):
        bad = x[~np.isfinite(fx)][0]
        raise EvaluationError(f"integrand not finite at node {bad!r}", node=float(bad))
    return float(rule.weights @ fx)


_TAIL_SIGMAS = 8.5
_MAX_SEGMENT_SIGMAS = 4.0


@lru_cache(maxsize=128)
def _legendre_rule(order):
    t, w = leggauss(order)
    t.flags.writeable = False
    w.flags.writeable = False
    return t, w


def expect_piecewise(f, m, nu, breaks=(), order=61):
    """E{f(x)} for x ~ N(m, nu^2), integrand smooth between the break points.

    The support is truncated at m +/- 8.5 nu (mass below 1e-16), split at the
    breaks, and each piece is integrated by Gauss-Legendre against the
    Gaussian density.  Segments wider than 4 nu are subdivided so the rule
    resolves the density's scale.
    """
    if not nu > 0.0:
        raise ValueError("nu must be positive")
    lo = m - _TAIL_SIGMAS * nu
    hi = m + _TAIL_SIGMAS * nu
    cuts = [lo] + sorted(float(b) for b in breaks if lo < b < hi) + [hi]
    edges = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        pieces = max(1, int(np.ceil((b - a) / (_MAX_SEGMENT_SIGMAS * nu))))
        edges.extend(np.linspace(a, b, pieces + 1)[:-1])
    edges.append(hi)
    t, w = _legendre_rule(order)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        x = 0.5 * (b - a) * t + 0.5 * (a + b)
        fx = np.asarray(f(x), dtype=float)
        if not np.all(np.isfinite(fx)):
            bad = x[~np.isfinite(fx)][0]
            raise EvaluationError(f"integrand not finite at node {bad!r}", node=float(bad))
        z = (x - m) / nu
        dens = np.exp(-0.5 * z * z) / (nu * SQRT_2PI)
        total += 0.5 * (b - a) * float(w @ (fx * dens))
    return total


def psi_triple_quadrature(spec, y, m, nu, order=61):
    """Independent (Psi0, Psi1, Psi2) evaluation from the pointwise loss.

    Psi0 and Psi1 integrate ``loss_value`` and ``loss_weak_grad`` over the
    predictor's Gaussian law, splitting at the loss's kink locations.  Psi2
    integrates the pointwise curvature where one exists and otherwise falls
    back to a central difference of the integrated Psi1 (step 1e-4 max(1,nu)).
    """
    from .losses import PsiTriple, kink_points, loss_curvature, loss_value, loss_weak_grad

    if not nu > 0.0:
        raise ValueError("nu must be positive")
    breaks = kink_points(spec, y)
    psi0 = expect_piecewise(lambda x: loss_value(spec, y, x), m, nu, breaks, order)

    def psi1_at(mm):
        return expect_piecewise(lambda x: loss_weak_grad(spec, y, x), mm, nu, breaks, order)

    psi1 = psi1_at(m)
    try:
        psi2 = expect_piecewise(lambda x: loss_curvature(spec, y, x), m, nu, breaks, order)
    except ValueError:
        h = 1e-4 * max(1.0, nu)
        psi2 = (psi1_at(m + h) - psi1_at(m - h)) / (2.0 * h)
    return PsiTriple(psi0, psi1, psi2)
