"""nbode: neighborhood-regularized neural ODE surrogates for chaotic dynamics."""

from .systems import (
    AffineTransform,
    SystemSpec,
    chen_hyper,
    eval_jacobian,
    eval_vector_field,
    from_name,
    lorenz63,
    lorenz96,
    transform_field,
    transform_jacobian,
)
from .integrate import LyapunovResult, StepControl, integrate_adaptive, lyapunov_spectrum, rk4_step
from .model import MlpVectorField, PerturbationBatch, init_params, load_model, save_model
from .estimator import NeighborhoodODE, check_trajectories

__version__ = "0.1.0"
