"""Multimodal VAE laboratory: a mixture-of-unimodal-posteriors prior and five aggregation baselines.

Everything runs on numpy through a small reverse-mode autodiff engine
(:mod:`mmvmlab.autodiff`).
"""
from .aggregation import STRATEGIES, aggregate
from .data import MultimodalDataset, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .distributions import DiagonalGaussian, GaussianMixture, RngStream, js_divergence, kl_to_mixture
from .errors import ConfigError, ContractViolation, FormatError, NumericError
from .evaluation import RunMetrics, evaluate
from .model import ModelConfig, MultimodalModel, init_model, load_checkpoint, save_checkpoint
from .objective import ObjectiveBreakdown, mse_bound, objective_step
from .training import RunConfig, build_and_train, train

__version__ = "0.1.0"

__all__ = [
    "STRATEGIES", "aggregate", "MultimodalDataset", "SyntheticConfig", "generate_synthetic",
    "load_dataset", "save_dataset", "DiagonalGaussian", "GaussianMixture", "RngStream",
    "js_divergence", "kl_to_mixture", "ConfigError", "ContractViolation", "FormatError",
    "NumericError", "RunMetrics", "evaluate", "ModelConfig", "MultimodalModel", "init_model",
    "load_checkpoint", "save_checkpoint", "ObjectiveBreakdown", "mse_bound", "objective_step",
    "RunConfig", "build_and_train", "train",
]
