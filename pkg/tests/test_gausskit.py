"""Gaussian primitive layer: density/CDF accuracy and expectation identities.

Every identity is checked against adaptive numeric integration of the raw
integrand times the Gaussian density, so the closed forms never validate
themselves.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from vmpmix.gausskit import (
    ScalarGaussian,
    abs_moment,
    cdf_diff,
    dirac_moment,
    normal_cdf,
    normal_pdf,
    sign_moment,
    trunc_moment1,
    trunc_moment2,
)

MEANS = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]
SDS = [0.1, 1.0, 10.0]
INTERVALS = [(-np.inf, 0.0), (0.0, np.inf), (-1.0, 1.0), (-np.inf, np.inf)]


def numeric_expect(f, g, lo=-np.inf, hi=np.inf, breaks=()):
    lo = max(lo, g.mean - 12 * g.sd)
    hi = min(hi, g.mean + 12 * g.sd)
    if hi <= lo:
        return 0.0
    pts = [b for b in breaks if lo < b < hi] or None
    val, _ = quad(
        lambda x: f(x) * normal_pdf(x, g.mean, g.sd), lo, hi, limit=400, points=pts
    )
    return val


class TestDensity:
    def test_standard_normal_at_zero(self):
        assert normal_pdf(0.0, 0.0, 1.0) == pytest.approx(0.3989422804, abs=1e-10)

    @pytest.mark.parametrize("m,sd", [(0.0, 1.0), (-2.5, 0.3), (7.0, 11.0)])
    def test_value_at_mean(self, m, sd):
        assert normal_pdf(m, m, sd) == pytest.approx(1.0 / (sd * math.sqrt(2 * math.pi)), rel=1e-14)

    def test_symmetry(self):
        assert normal_pdf(1.7, 0.5, 2.0) == normal_pdf(-0.7, 0.5, 2.0)

    def test_rejects_bad_sd(self):
        with pytest.raises(ValueError):
            normal_pdf(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            normal_pdf(0.0, 0.0, -1.0)


class TestCdf:
    def test_median(self):
        assert normal_cdf(0.3, 0.3, 5.0) == 0.5

    def test_left_tail_underflows_cleanly(self):
        assert normal_cdf(-1e6, 0.0, 1.0) <= 1e-300

    def test_against_adaptive_integration(self):
        # frozen from quad of the density over (-inf, 1.96]
        assert normal_cdf(1.96, 0.0, 1.0) == pytest.approx(0.9750021048517795, rel=1e-12)

    def test_high_accuracy_band(self):
        from mpmath import erfc, mpf

        zs = np.linspace(-8, 8, 33)
        for z in zs:
            exact = float(0.5 * erfc(-mpf(float(z)) / mpf(2) ** 0.5))
            assert normal_cdf(z, 0.0, 1.0) == pytest.approx(exact, rel=1e-12)

    def test_rejects_bad_sd(self):
        with pytest.raises(ValueError):
            normal_cdf(0.0, 0.0, 0.0)


class TestIdentities:
    @pytest.mark.parametrize("m", MEANS)
    @pytest.mark.parametrize("sd", SDS)
    def test_dirac_is_density(self, m, sd):
        g = ScalarGaussian(m, sd)
        for c in (-1.0, 0.0, 2.5):
            assert dirac_moment(c, g) == normal_pdf(c, m, sd)

    def test_dirac_examples(self):
        g = ScalarGaussian(0.0, 1.0)
        assert dirac_moment(0.0, g) == pytest.approx(0.3989422804, abs=1e-10)
        g2 = ScalarGaussian(1.5, 0.7)
        assert dirac_moment(1.5, g2) == pytest.approx(1 / (0.7 * math.sqrt(2 * math.pi)), rel=1e-14)
        lo = dirac_moment(1.5 - 5 * 0.7, g2)
        hi = dirac_moment(1.5 + 5 * 0.7, g2)
        assert lo == pytest.approx(hi, rel=1e-13)
        assert lo < 1e-5

    @pytest.mark.parametrize("m", MEANS)
    @pytest.mark.parametrize("sd", SDS)
    def test_sign_against_integration(self, m, sd):
        g = ScalarGaussian(m, sd)
        ref = numeric_expect(np.sign, g, breaks=(0.0,))
        assert sign_moment(g) == pytest.approx(ref, abs=1e-10)
        # the open bound saturates in float64 once |m|/sd exceeds ~8
        assert -1.0 <= sign_moment(g) <= 1.0
        if abs(m) / sd < 8:
            assert -1.0 < sign_moment(g) < 1.0

    def test_sign_examples(self):
        assert sign_moment(ScalarGaussian(0.0, 3.0)) == 0.0
        assert sign_moment(ScalarGaussian(100.0, 1.0)) == pytest.approx(1.0, abs=1e-12)
        # frozen Monte Carlo value (1e7 draws, 3 s.e. ~ 7e-4)
        assert sign_moment(ScalarGaussian(1.0, 1.0)) == pytest.approx(0.6826895, abs=7e-4)

    def test_sign_is_cdf_complement_exactly(self):
        g = ScalarGaussian(0.73, 2.1)
        assert sign_moment(g) == 1.0 - 2.0 * normal_cdf(0.0, g.mean, g.sd)

    @pytest.mark.parametrize("m", MEANS)
    @pytest.mark.parametrize("sd", SDS)
    def test_abs_against_integration(self, m, sd):
        g = ScalarGaussian(m, sd)
        ref = numeric_expect(abs, g, breaks=(0.0,))
        assert abs_moment(g) == pytest.approx(ref, rel=1e-8)
        assert abs_moment(g) >= abs(m)

    def test_abs_examples(self):
        # frozen Monte Carlo value (1e7 draws); analytic sqrt(2/pi)
        assert abs_moment(ScalarGaussian(0.0, 1.0)) == pytest.approx(0.7978846, abs=6e-4)
        assert abs_moment(ScalarGaussian(50.0, 0.5)) == pytest.approx(50.0, rel=1e-12)
        assert abs_moment(ScalarGaussian(-1.3, 0.8)) == pytest.approx(abs_moment(ScalarGaussian(1.3, 0.8)), rel=1e-14)

    @pytest.mark.parametrize("m", MEANS)
    @pytest.mark.parametrize("sd", SDS)
    @pytest.mark.parametrize("ab", INTERVALS)
    def test_trunc1_against_integration(self, m, sd, ab):
        g = ScalarGaussian(m, sd)
        ref = numeric_expect(lambda x: x, g, *ab)
        got = trunc_moment1(ab[0], ab[1], g)
        assert got == pytest.approx(ref, rel=1e-8, abs=1e-10)

    @pytest.mark.parametrize("m", MEANS)
    @pytest.mark.parametrize("sd", SDS)
    @pytest.mark.parametrize("ab", INTERVALS)
    def test_trunc2_against_integration(self, m, sd, ab):
        g = ScalarGaussian(m, sd)
        ref = numeric_expect(lambda x: x * x, g, *ab)
        got = trunc_moment2(ab[0], ab[1], g)
        assert got == pytest.approx(ref, rel=1e-8, abs=1e-10)
        assert got >= 0.0

    def test_trunc_examples(self):
        g = ScalarGaussian(0.0, 1.0)
        assert trunc_moment1(-np.inf, np.inf, ScalarGaussian(2.5, 3.0)) == pytest.approx(2.5, rel=1e-14)
        assert trunc_moment1(0.0, np.inf, g) == pytest.approx(0.3989423, abs=1e-7)
        assert trunc_moment1(1.2, 1.2, g) == 0.0
        assert trunc_moment2(-np.inf, np.inf, ScalarGaussian(2.0, 3.0)) == pytest.approx(13.0, rel=1e-14)
        assert trunc_moment2(0.0, np.inf, g) == pytest.approx(0.5, rel=1e-12)
        assert trunc_moment2(-1.0, 1.0, g) == pytest.approx(0.1987480, abs=1e-7)

    def test_trunc_rejects_reversed_interval(self):
        g = ScalarGaussian(0.0, 1.0)
        with pytest.raises(ValueError):
            trunc_moment1(1.0, 0.0, g)
        with pytest.raises(ValueError):
            trunc_moment2(1.0, 0.0, g)

    @pytest.mark.parametrize("m", [-2.0, 0.0, 1.5])
    @pytest.mark.parametrize("sd", SDS)
    def test_trunc1_additivity(self, m, sd):
        g = ScalarGaussian(m, sd)
        for a, b, c in [(-np.inf, -0.5, 2.0), (-1.0, 0.0, 1.0), (0.3, 1.7, np.inf)]:
            total = trunc_moment1(a, c, g)
            split = trunc_moment1(a, b, g) + trunc_moment1(b, c, g)
            assert split == pytest.approx(total, rel=1e-12, abs=1e-14)

    @pytest.mark.parametrize("m", [-2.0, 0.0, 1.5])
    @pytest.mark.parametrize("sd", SDS)
    def test_abs_is_trunc_difference(self, m, sd):
        g = ScalarGaussian(m, sd)
        diff = trunc_moment1(0.0, np.inf, g) - trunc_moment1(-np.inf, 0.0, g)
        assert abs_moment(g) == pytest.approx(diff, rel=1e-12)

    def test_scalar_gaussian_validation(self):
        with pytest.raises(ValueError):
            ScalarGaussian(0.0, 0.0)


class TestCdfDiff:
    def test_matches_plain_difference(self):
        from scipy.special import ndtr

        rng = np.random.default_rng(5)
        hi = rng.normal(size=100)
        lo = hi - np.abs(rng.normal(size=100))
        np.testing.assert_allclose(cdf_diff(hi, lo), ndtr(hi) - ndtr(lo), rtol=1e-12, atol=1e-300)

    def test_tiny_gap_keeps_relative_accuracy(self):
        gap = 1e-12
        got = cdf_diff(1.0 + gap, 1.0)
        exact = gap * normal_pdf(1.0, 0.0, 1.0)  # first-order, error O(gap^2)
        assert got == pytest.approx(exact, rel=1e-9)

    def test_deep_tail_difference(self):
        got = cdf_diff(-19.9, -20.1)
        from mpmath import erfc, mpf

        exact = float(0.5 * erfc(mpf("19.9") / mpf(2) ** 0.5) - 0.5 * erfc(mpf("20.1") / mpf(2) ** 0.5))
        assert got == pytest.approx(exact, rel=1e-9)
