"""Dynamic propensity model: latent purchase propensity driven by marketing touches."""
from .baselines import GlmFit, LaggedDesign, build_lagged_design, fit_glm, predict_glm
from .estimation import FitReport, SgdConfig, fit, grad_log_joint
from .evaluation import last_touch_histogram, roc_curve, score_customer
from .model import ContractError, CustomerHistory, ModelParams, PropensityPath, log_joint, predict_propensity, purchase_prob
from .particles import FilterConfig, ParticleSet, estimate_path, filter_step, init_particles
from .simulate import SimConfig, calibrate_offset, generate

__all__ = [
    "ContractError", "CustomerHistory", "ModelParams", "PropensityPath",
    "predict_propensity", "purchase_prob", "log_joint",
    "FilterConfig", "ParticleSet", "init_particles", "filter_step", "estimate_path",
    "SgdConfig", "FitReport", "fit", "grad_log_joint",
    "LaggedDesign", "GlmFit", "build_lagged_design", "fit_glm", "predict_glm",
    "SimConfig", "generate", "calibrate_offset",
    "score_customer", "roc_curve", "last_touch_histogram",
]
