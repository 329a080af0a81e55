"""Tensor probabilistic PCA: Tucker-structured Gaussian models, EM and power-iteration fits."""
from . import diagnostics, em, evaluation, harness, model, power_iter, tensor_core
from .em import EmConfig, EmResult, fit_em
from .evaluation import align_factors, procrustes_error, sin_theta, summarize
from .harness import ExperimentSpec, generate_truth, run_experiment
from .model import Dataset, TpcaModel, log_likelihood, new_model, sample
from .power_iter import PowerConfig, PowerEstimates, run_power

__version__ = "0.1.0"
