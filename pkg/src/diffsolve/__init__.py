"""Exponential-integrator samplers for diffusion models, with an analytic test oracle."""

from .models import (
    CountingModel,
    GuidanceSpec,
    PredictionModel,
    ThresholdSpec,
    as_data_prediction,
    as_noise_prediction,
    classifier_free_combine,
    classifier_guide,
    eps_to_x0,
    guided_model,
    threshold_x0,
    thresholded_model,
    x0_to_eps,
)
from .ode_solvers import (
    SampleResult,
    SolverSpec,
    StepState,
    ddim_eta_step,
    dpm_pp_2m_step,
    dpm_pp_2s_step,
    dpm_solver_2_step,
    first_order_data_step,
    init_multistep_state,
    sample,
    taylor_coeff,
)
from .oracle import GaussianOracle, oracle_eps, oracle_x0, reference_solve, verify_exact_solution
from .schedule import (
    NoiseSchedule,
    TimeGrid,
    alpha_sigma_lambda,
    discrete_interpolation,
    inverse_lambda,
    make_time_grid,
    vp_cosine,
    vp_linear_beta,
)
from .sde_solvers import NoiseStream, sde_1_step, sde_2m_step, sde_pp_1_step, sde_pp_2m_step

__version__ = "0.1.0"
