"""I-prior regression: kernels, estimation and prediction."""

from .datasets import load_orange
from .errors import DataError, IpriorError, NumericalError
from .estimation import (ControlOptions, FitResult, StandardErrors, deviance, em_step,
                         fit_direct, fit_em, fit_fixed, fit_mixed, fit_restarts, iprior,
                         log_likelihood, log_likelihood_gradient, q_function,
                         standard_errors, update)
from .kernels import (Categorical, Continuous, Functional, GramMatrix, centre_gram,
                      kern_canonical, kern_fbm, kern_linear, kern_pearson, kern_poly,
                      kern_se, sobolev_inner_product)
from .model import (CovariateSpec, Hyperparameters, KernelSpec, LoadedModel, ModelSpec,
                    build_H, check_theta, load_model, param_to_theta, theta_to_param,
                    to_gpr_kernel)
from .posterior import (UNAVAILABLE, Prediction, fitted_values, get_convergence, get_estl,
                        get_hyp, get_intercept, get_kern_matrix, get_kernels, get_lambda,
                        get_method, get_niter, get_prederror, get_psi, get_se, get_size,
                        get_time, intercept, plot_data, predict, residuals, summary)
from .simulate import SimConfig, gen_smooth, sample_iprior_path, smooth_mean

__version__ = "0.1.0"
