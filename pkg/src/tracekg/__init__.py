"""Multi-fidelity Bayesian optimization with trace observations."""

from .fidelity import FidelitySet, FidelitySpace, zero_set
from .kernels import KernelSpec, NumericalError, kernel_eval
from .gp import GaussianProcess, GpEnsemble, fit, log_marginal_likelihood, sample_hyperparameters
from .cost import CostObservation, ExactCostModel, GpCostModel, fit_cost
from .acquisition import (
    InnerConfig,
    LossEstimate,
    expected_improvement,
    knowledge_gradient,
    sigma_tilde,
    simulate_expected_min,
    takg,
    takg_zero_avoiding,
    voi,
    voi_zero_avoiding,
)

__version__ = "0.1.0"
