"""Variational message passing for Bayesian mixed regression and
classification under general, possibly non-differentiable, loss functions."""

__version__ = "0.1.0"

from .gausskit import (
    ScalarGaussian,
    abs_moment,
    dirac_moment,
    normal_cdf,
    normal_pdf,
    sign_moment,
    trunc_moment1,
    trunc_moment2,
)
from .losses import LinkSpec, LossSpec, PsiTriple, loss_value, loss_weak_grad, psi_triple, psi_triple_linked, psi_vectors
from .model import (
    DesignBlocks,
    GaussianState,
    InvGammaState,
    PredictorMoments,
    PriorConfig,
    SingularMatrixError,
    VariationalState,
    assemble_rbar,
    elbo,
    kl_gaussian_to_prior,
    kl_invgamma,
    predictor_moments,
)
from .quadrature import QuadratureRule, agh_expect, expect_piecewise, gauss_hermite_rule, psi_triple_quadrature
from .vmp import FitOptions, FitReport, fit_vmp, gauss_step, update_sigma_eps, update_sigma_h
from .svmp import NaturalParams, StochasticOptions, fit_svmp, full_data_elbo, learning_rate, sample_minibatch, svmp_step
from .baselines import (
    AugmentedState,
    McmcDraws,
    accuracy_score,
    fit_mfvb_quantile,
    gig_half_moments,
    kde_density,
    marginal_accuracies,
    rwm_sample,
)
from .simlab import Dataset, ExperimentPlan, SimConfig, read_dataset, run_experiment, simulate, write_dataset
