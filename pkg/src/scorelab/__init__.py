"""Desk-scale laboratory for score and score-Jacobian estimation.

Data are drawn as a bounded map of a low-dimensional uniform latent plus
isotropic Gaussian noise.  The package provides exact score oracles for that
law, implicit and denoising score-matching objectives over structured GELU
network classes, exact Hermite-series verification of the Gaussian-weight
interpolation inequalities, and a reproducible convergence-rate harness.
"""

from .generators import (DataBatch, DomainError, GeneratorSpec, NoiseConfig,
                         circle_generator, make_affine, make_constant,
                         make_polynomial, make_trigonometric, ou_coeffs,
                         sample_clean, sample_noisy, sample_ou_pair)
from .oracle import (OracleContext, OracleScore, check_derivative_bound,
                     log_density, make_context, posterior_mean,
                     posterior_weights, sample_marginal, true_score,
                     true_score_divergence, true_score_jacobian)
from .hermite import (HermiteSeries, hermite_eval, random_series,
                      series_derivative, series_divergence,
                      series_jacobian_frob_sq, series_l2_norm_sq,
                      series_sobolev_seminorm_sq, verify_gn_gaussian,
                      verify_gn_weighted)
from .nets import (AffineScore, NetworkParams, ScoreModel, gelu, gelu_prime,
                   gelu_second, net_divergence, net_forward, net_jacobian,
                   perturbation_stability_audit, sobolev_monitor)
from .objectives import (DivergenceShift, LossReport, dsm_identity_check,
                         dsm_loss_sample, empirical_risk, ism_identity_check,
                         ism_loss)
from .training import (ParamGradient, TrainConfig, TrainHistory,
                       TrainingDiverged, gradient_check, init_params,
                       param_gradient, train_erm)
from .evaluation import (ErrorEstimate, RateFit, association_check, fit_rate,
                         jacobian_error, score_error)
from .experiment import (ExperimentConfig, RunRecord, emit_plotdata,
                         rate_report, read_records, run_single, run_sweep,
                         run_verify, write_records)

__version__ = "0.1.0"
