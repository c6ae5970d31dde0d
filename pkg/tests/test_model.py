"""Model core: predictor moments, prior assembly, KL components, ELBO."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gammaln

from vmpmix.losses import LossSpec, psi_vectors
from vmpmix.model import (
    DesignBlocks,
    GaussianState,
    InvGammaState,
    PriorConfig,
    VariationalState,
    assemble_rbar,
    elbo,
    kl_gaussian_to_prior,
    kl_invgamma,
    predictor_moments,
)


def toy_design(n=6, p=2, d_h=(3,), seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    Z = [rng.standard_normal((n, dh)) for dh in d_h]
    return DesignBlocks(X=X, Z=Z)


class TestDesignBlocks:
    def test_dimensions(self):
        design = toy_design()
        assert design.n == 6 and design.p == 2 and design.H == 1
        assert design.d_h == (3,) and design.d_star == 5
        assert design.C.shape == (6, 5)

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError):
            DesignBlocks(X=np.zeros((5, 2)), Z=[np.zeros((4, 3))])

    def test_asymmetric_structure_matrix(self):
        with pytest.raises(ValueError):
            DesignBlocks(X=np.zeros((3, 2)), R_beta=np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_no_random_effects(self):
        design = DesignBlocks(X=np.ones((4, 1)))
        assert design.H == 0 and design.d_star == 1


class TestPredictorMoments:
    def test_unit_vector(self):
        design = DesignBlocks(X=np.eye(3))
        gauss = GaussianState(np.zeros(3), np.eye(3))
        pm = predictor_moments(design, gauss)
        np.testing.assert_allclose(pm.m, 0.0)
        np.testing.assert_allclose(pm.v2, 1.0)

    def test_quadratic_form(self):
        design = DesignBlocks(X=np.array([[1.0, 1.0]]))
        gauss = GaussianState(np.array([1.0, 2.0]), np.diag([4.0, 9.0]))
        pm = predictor_moments(design, gauss)
        assert pm.m[0] == pytest.approx(3.0)
        assert pm.v2[0] == pytest.approx(13.0)

    def test_scaling_bilinearity(self):
        design = toy_design()
        rng = np.random.default_rng(1)
        A = rng.standard_normal((5, 5))
        Sigma = A @ A.T + np.eye(5)
        mu = rng.standard_normal(5)
        v2 = predictor_moments(design, GaussianState(mu, Sigma)).v2
        v2_scaled = predictor_moments(design, GaussianState(mu, 2.5 * Sigma)).v2
        np.testing.assert_allclose(v2_scaled, 2.5 * v2, rtol=1e-12)

    def test_dimension_mismatch(self):
        design = toy_design()
        with pytest.raises(ValueError):
            predictor_moments(design, GaussianState(np.zeros(3), np.eye(3)))


class TestAssembleRbar:
    def test_no_blocks(self):
        design = DesignBlocks(X=np.ones((3, 2)), R_beta=np.eye(2) * 2.0)
        prior = PriorConfig(sigma2_beta=4.0)
        rbar = assemble_rbar(prior, [], design)
        np.testing.assert_allclose(rbar, np.eye(2) * 0.5)

    def test_unit_gammas(self):
        design = toy_design()
        prior = PriorConfig.for_design(design, sigma2_beta=1.0)
        rbar = assemble_rbar(prior, [InvGammaState(2.0, 2.0)], design)
        np.testing.assert_allclose(rbar, np.eye(5))

    def test_three_block_toy(self):
        X = np.ones((4, 1))
        Z = [np.ones((4, 2)), np.ones((4, 1))]
        R1 = np.array([[1.0, 0.25], [0.25, 1.0]])
        R2 = np.array([[3.0]])
        design = DesignBlocks(X=X, Z=Z, R_beta=np.array([[2.0]]), R=[R1, R2])
        prior = PriorConfig(sigma2_beta=4.0, A=(1.0, 1.0), B=(1.0, 1.0))
        ig = [InvGammaState(2.0, 1.0), InvGammaState(3.0, 1.0)]  # gammas 2 and 3
        rbar = assemble_rbar(prior, ig, design)
        expected = np.zeros((4, 4))
        expected[0, 0] = 2.0 / 4.0
        expected[1:3, 1:3] = 2.0 * R1
        expected[3, 3] = 3.0 * 3.0
        np.testing.assert_allclose(rbar, expected)

    def test_block_count_mismatch(self):
        design = toy_design()
        prior = PriorConfig.for_design(design)
        with pytest.raises(ValueError):
            assemble_rbar(prior, [], design)


class TestKlGaussian:
    def test_zero_at_prior(self):
        design = DesignBlocks(X=np.ones((3, 1)))
        prior = PriorConfig(sigma2_beta=1.0)
        gauss = GaussianState(np.zeros(1), np.eye(1))
        rbar = assemble_rbar(prior, [], design)
        assert kl_gaussian_to_prior(gauss, rbar, prior, [], design) == pytest.approx(0.0, abs=1e-14)

    def test_two_dim_toy_vs_closed_form(self):
        # independent closed-form Gaussian KL: q = N(mu, Sigma), p = N(0, s2 I)
        design = DesignBlocks(X=np.ones((3, 2)))
        s2 = 3.0
        prior = PriorConfig(sigma2_beta=s2)
        mu = np.array([0.4, -0.7])
        Sigma = np.array([[0.9, 0.2], [0.2, 1.4]])
        gauss = GaussianState(mu, Sigma)
        rbar = assemble_rbar(prior, [], design)
        sign, logdet_q = np.linalg.slogdet(Sigma)
        kl = 0.5 * (
            np.trace(Sigma / s2) + mu @ mu / s2 - 2.0 + 2.0 * math.log(s2) - logdet_q
        )
        got = kl_gaussian_to_prior(gauss, rbar, prior, [], design)
        assert got == pytest.approx(-kl, rel=1e-12)

    def test_quadratic_scaling_in_mu(self):
        design = DesignBlocks(X=np.ones((3, 1)))
        prior = PriorConfig(sigma2_beta=2.0)
        rbar = assemble_rbar(prior, [], design)
        base = kl_gaussian_to_prior(GaussianState([1.0], [[1.0]]), rbar, prior, [], design)
        doubled = kl_gaussian_to_prior(GaussianState([2.0], [[1.0]]), rbar, prior, [], design)
        # doubling mu changes only the quadratic term: delta = -1/2 (4-1) mu^2 / s2
        assert doubled - base == pytest.approx(-0.5 * 3.0 * 1.0 / 2.0, rel=1e-12)

    def test_nonpositive_at_fixed_variance(self):
        rng = np.random.default_rng(3)
        design = DesignBlocks(X=np.ones((3, 2)))
        prior = PriorConfig(sigma2_beta=1.7)
        rbar = assemble_rbar(prior, [], design)
        for _ in range(10):
            A = rng.standard_normal((2, 2))
            gauss = GaussianState(rng.standard_normal(2), A @ A.T + 0.3 * np.eye(2))
            assert kl_gaussian_to_prior(gauss, rbar, prior, [], design) <= 1e-12


class TestKlInvGamma:
    def test_zero_at_prior(self):
        assert kl_invgamma(InvGammaState(2.5, 1.5), 2.5, 1.5, 0.0) == pytest.approx(0.0, abs=1e-14)

    def test_against_numeric_kl(self):
        # q consistent with the variational update: alpha = A + extra
        A, B, extra = 2.0001, 1.0001, 5.0
        q = InvGammaState(A + extra, 3.5)

        def ig_logpdf(x, a, b):
            return a * math.log(b) - gammaln(a) - (a + 1) * math.log(x) - b / x

        def integrand(x):
            lq = ig_logpdf(x, q.alpha, q.beta)
            lp = ig_logpdf(x, A, B)
            return math.exp(lq) * (lq - lp)

        kl, _ = quad(integrand, 1e-12, 200.0, limit=500)
        assert kl_invgamma(q, A, B, extra) == pytest.approx(-kl, abs=1e-6)

    def test_log_gamma_ratio_terms(self):
        from scipy.special import digamma

        A, B, extra = 1.3, 0.8, 4.0
        q = InvGammaState(A + extra, B)
        expected = gammaln(A + extra) - gammaln(A) - extra * digamma(A + extra)
        assert kl_invgamma(q, A, B, extra) == pytest.approx(expected, rel=1e-12)

    def test_nonpositive_for_consistent_shapes(self):
        # with alpha = A + extra the expression is a negative KL divergence
        rng = np.random.default_rng(4)
        for _ in range(20):
            extra = rng.uniform(0.0, 6.0)
            q = InvGammaState(2.0 + extra, rng.uniform(0.5, 5))
            assert kl_invgamma(q, 2.0, 1.0, extra) <= 1e-12

    def test_rejects_nonpositive_prior(self):
        with pytest.raises(ValueError):
            kl_invgamma(InvGammaState(1.0, 1.0), 0.0, 1.0, 0.0)


class TestElbo:
    def test_empty_model_at_prior_is_zero(self):
        design = DesignBlocks(X=np.zeros((0, 2)), R_beta=np.eye(2))
        prior = PriorConfig(sigma2_beta=2.5)
        gauss = GaussianState(np.zeros(2), 2.5 * np.eye(2))
        state = VariationalState(gauss, InvGammaState(prior.A_eps, prior.B_eps), [])
        spec = LossSpec("quantile", tau=0.5)
        assert elbo(design, prior, state, spec, np.zeros(0)) == pytest.approx(0.0, abs=1e-12)

    def test_single_observation_toy_term_by_term(self):
        # one observation, one coefficient, every term written out directly
        design = DesignBlocks(X=np.array([[2.0]]), R_beta=np.array([[1.0]]))
        s2b, A_eps, B_eps, phi = 3.0, 2.2, 1.3, 1.5
        prior = PriorConfig(sigma2_beta=s2b, A_eps=A_eps, B_eps=B_eps, phi=phi)
        mu, sig2 = 0.7, 0.4
        alpha, beta = 4.0, 2.5
        state = VariationalState(
            GaussianState([mu], [[sig2]]), InvGammaState(alpha, beta), []
        )
        psi0 = np.array([0.9])
        gamma = alpha / beta
        expected = (
            -gamma * 0.9 / phi
            + 0.5 * math.log(sig2)
            - 0.5 * mu * mu / s2b
            - 0.5 * sig2 / s2b
            - 0.5 * math.log(s2b)
            + 0.5
            + gammaln(A_eps + 1.0 / phi)
            - gammaln(A_eps)
            + A_eps * math.log(B_eps / beta)
            - (1.0 / phi) * math.log(beta)
            - (B_eps - beta) * gamma
        )
        got = elbo(design, prior, state, LossSpec("quantile", tau=0.5), psi0)
        assert got == pytest.approx(expected, rel=1e-13)

    def test_linear_in_psi0_shift(self):
        design = toy_design()
        prior = PriorConfig.for_design(design, phi=2.0)
        gauss = GaussianState(np.zeros(5), np.eye(5))
        state = VariationalState(gauss, InvGammaState(3.0, 2.0), [InvGammaState(2.0, 1.0)])
        psi0 = np.abs(np.random.default_rng(0).standard_normal(6))
        base = elbo(design, prior, state, LossSpec("svc"), psi0)
        shifted = elbo(design, prior, state, LossSpec("svc"), psi0 + 0.37)
        gamma = 3.0 / 2.0
        assert shifted - base == pytest.approx(-gamma * 6 * 0.37 / 2.0, rel=1e-12)

    def test_permutation_invariance(self):
        design = toy_design()
        prior = PriorConfig.for_design(design)
        gauss = GaussianState(np.zeros(5), np.eye(5))
        state = VariationalState(gauss, InvGammaState(3.0, 2.0), [InvGammaState(2.0, 1.0)])
        psi0 = np.array([0.1, 0.7, 0.3, 0.9, 0.2, 0.5])
        a = elbo(design, prior, state, LossSpec("svc"), psi0)
        b = elbo(design, prior, state, LossSpec("svc"), psi0[::-1].copy())
        assert a == pytest.approx(b, rel=1e-14)

    def test_gradient_and_hessian_identity(self):
        # finite differences of the bound in mu match g and H on a small instance
        rng = np.random.default_rng(7)
        design = toy_design(n=12, p=2, d_h=(3,), seed=7)
        d = design.d_star
        prior = PriorConfig.for_design(design, sigma2_beta=4.0, phi=1.3)
        y = rng.standard_normal(12)
        spec = LossSpec("huber_regression", eps=0.3)
        Sigma = 0.5 * np.eye(d)
        ig_eps, ig = InvGammaState(3.0, 2.0), [InvGammaState(2.5, 1.5)]
        rbar = assemble_rbar(prior, ig, design)
        mu0 = 0.4 * rng.standard_normal(d)

        def bound(mu):
            st = VariationalState(GaussianState(mu, Sigma), ig_eps, ig)
            pm = predictor_moments(design, st.gauss)
            p0, _, _ = psi_vectors(spec, y, pm.m, np.sqrt(pm.v2))
            return elbo(design, prior, st, spec, p0)

        pm = predictor_moments(design, GaussianState(mu0, Sigma))
        _, p1, p2 = psi_vectors(spec, y, pm.m, np.sqrt(pm.v2))
        g = -rbar @ mu0 - ig_eps.gamma * (design.C.T @ p1) / prior.phi
        H = -(rbar + ig_eps.gamma * (design.C * p2[:, None]).T @ design.C / prior.phi)
        h = 1e-5
        eye = np.eye(d)
        g_fd = np.array([(bound(mu0 + h * e) - bound(mu0 - h * e)) / (2 * h) for e in eye])
        np.testing.assert_allclose(g_fd, g, rtol=1e-5, atol=1e-8)
        h2 = 2e-4  # double differencing needs the larger step to beat roundoff
        H_fd = np.empty((d, d))
        for i in range(d):
            for j in range(d):
                H_fd[i, j] = (
                    bound(mu0 + h2 * eye[i] + h2 * eye[j])
                    - bound(mu0 + h2 * eye[i] - h2 * eye[j])
                    - bound(mu0 - h2 * eye[i] + h2 * eye[j])
                    + bound(mu0 - h2 * eye[i] - h2 * eye[j])
                ) / (4 * h2 * h2)
        np.testing.assert_allclose(H_fd, H, rtol=1e-4, atol=1e-6)


class TestEvidenceBound:
    def test_elbo_below_log_evidence_on_conjugate_instance(self):
        # expectile tau=1/2 is Gaussian linear regression given the variance
        # parameters, so the full evidence is an exact two-dimensional
        # quadrature of closed-form Gaussian marginals over the two
        # Inverse-Gamma priors; the fitted bound must sit below it
        from scipy.integrate import dblquad
        from scipy.stats import multivariate_normal

        from vmpmix.vmp import fit_vmp

        rng = np.random.default_rng(42)
        n, p, d_h = 12, 2, 2
        X = rng.standard_normal((n, p))
        Z = [rng.standard_normal((n, d_h))]
        design = DesignBlocks(X=X, Z=Z)
        y = rng.standard_normal(n)
        phi, s2b, A, B = 1.0, 4.0, 2.0001, 1.0001
        prior = PriorConfig(sigma2_beta=s2b, A_eps=A, B_eps=B, A=(A,), B=(B,), phi=phi)
        spec = LossSpec("expectile", tau=0.5)
        report = fit_vmp(y, design, prior, spec)
        assert report.converged

        def ig_logpdf(x):
            return A * math.log(B) - gammaln(A) - (A + 1) * math.log(x) - B / x

        def integrand(s2_eps, s2_u):
            S0 = np.zeros((design.d_star, design.d_star))
            S0[:p, :p] = s2b * np.eye(p)
            S0[p:, p:] = s2_u * np.eye(d_h)
            cov = 2.0 * phi * s2_eps * np.eye(n) + design.C @ S0 @ design.C.T
            log_ev = (
                -(n / phi) * math.log(s2_eps)
                + (n / 2.0) * math.log(4.0 * math.pi * phi * s2_eps)
                + multivariate_normal(mean=np.zeros(n), cov=cov).logpdf(y)
            )
            return math.exp(log_ev + ig_logpdf(s2_eps) + ig_logpdf(s2_u))

        value, err = dblquad(integrand, 1e-4, 40.0, 1e-3, 15.0, epsrel=1e-7)
        log_evidence = math.log(value)
        assert err / value < 1e-5
        assert report.elbo_trace[-1] <= log_evidence + 1e-8


class TestStates:
    def test_gaussian_state_requires_spd(self):
        from vmpmix.model import SingularMatrixError

        with pytest.raises(SingularMatrixError):
            GaussianState(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_gaussian_state_requires_symmetry(self):
        with pytest.raises(ValueError):
            GaussianState(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_invgamma_gamma_accessor(self):
        assert InvGammaState(3.0, 2.0).gamma == pytest.approx(1.5)
        with pytest.raises(ValueError):
            InvGammaState(0.0, 1.0)

    def test_prior_config_validation(self):
        with pytest.raises(ValueError):
            PriorConfig(A=(1.0,), B=())
        with pytest.raises(ValueError):
            PriorConfig(sigma2_beta=-1.0)
