"""Minibatch Adam training for the multimodal VAE and its autoencoder baseline."""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .aggregation import check_strategy
from .autodiff import AdamState, ParameterSet
from .data import MultimodalDataset, SyntheticConfig
from .distributions import RngStream
from .errors import ConfigError, NumericError
from .model import ModelConfig, MultimodalModel, init_model
from .objective import ObjectiveBreakdown, mse_bound, objective_step

log = logging.getLogger(__name__)

# 2^-8 .. 2^3, the grid used for the image benchmark
BETA_GRID = tuple(2.0 ** k for k in range(-8, 4))
ACCEPTANCE_BETAS = tuple(2.0 ** k for k in (-7, -5, -3, -1, 1, 3))


@dataclass
class RunConfig:
    strategy: str = "mmvm"
    beta: float = 1.0
    seed: int = 0
    epochs: int = 200
    batch_size: int = 256
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    likelihood: str = "gaussian-fixed-scale"
    scale: float = 1.0
    include_prior_expert: bool = True
    stop_prior_gradient: bool = False
    log_interval: int = 50
    data: dict | None = None
    data_path: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        check_strategy(self.strategy)
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        if self.epochs < 0 or self.batch_size < 1 or self.log_interval < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and log_interval >= 1 required")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.data is not None:
            SyntheticConfig.from_dict(self.data)

    def model_config(self, input_dims) -> ModelConfig:
        return ModelConfig(
            input_dims=tuple(input_dims), latent_dim=self.latent_dim, hidden=self.hidden,
            likelihood=self.likelihood, scale=self.scale, strategy=self.strategy,
            activation=self.activation, include_prior_expert=self.include_prior_expert,
            stop_prior_gradient=self.stop_prior_gradient)

    def adam(self, params: ParameterSet) -> AdamState:
        return AdamState.for_params(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> RunConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(NumericError):
    """Raised with the last parameters whose loss and gradients were finite."""

    def __init__(self, message: str, model: MultimodalModel, epoch: int, step: int):
        super().__init__(message)
        self.model = model
        self.epoch = epoch
        self.step = step


@dataclass
class TrainResult:
    model: MultimodalModel
    state: AdamState
    trace: list[dict] = field(default_factory=list)
    steps: int = 0
    epochs: int = 0


def minibatches(n: int, batch_size: int, rng: RngStream, epoch: int):
    order = rng.split("shuffle", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _finite(grads: Mapping[str, np.ndarray]) -> bool:
    return all(np.isfinite(g).all() for g in grads.values())


def train(model: MultimodalModel, data: MultimodalDataset, cfg: RunConfig,
          rng: RngStream | None = None, objective: str = "elbo",
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Train in place with Adam; one trace entry per optimizer step.

    ``objective="autoencoder"`` maximizes :func:`mse_bound` instead of the
    beta-weighted objective (deterministic, no rate).
    """
    if data.dims != model.config.input_dims:
        raise ConfigError(f"dataset dims {data.dims} do not match model input dims {model.config.input_dims}")
    rng = RngStream(cfg.seed) if rng is None else rng
    state = cfg.adam(model.params)
    result = TrainResult(model, state)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in minibatches(len(data), cfg.batch_size, rng, epoch):
            X = data.batch(idx)
            leaves = model.params.leaves()
            try:
                if objective == "autoencoder":
                    node = mse_bound(model, X, leaves)
                    breakdown = ObjectiveBreakdown([], 0.0, float(node.value), 0.0, node)
                else:
                    breakdown = objective_step(model, X, cfg.beta, rng.split("step", step), leaves)
                grads = ad.backward(ad.neg(breakdown.node))
            except NumericError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {step}", model, epoch, step) from exc
            if not math.isfinite(breakdown.total) or not _finite(grads):
                raise TrainingDiverged(f"non-finite objective at epoch {epoch}, step {step}",
                                       model, epoch, step)
            full = model.params.zeros_like()
            full.update(grads)
            ad.adam_step(model.params, full, state)
            entry = {"epoch": epoch, "step": step, **breakdown.to_dict()}
            result.trace.append(entry)
            if callback is not None:
                callback(entry)
            if step % cfg.log_interval == 0:
                log.debug("epoch %d step %d total %.4f rate %.4f", epoch, step, breakdown.total, breakdown.rate)
            step += 1
        result.epochs = epoch + 1
    result.steps = step
    return result


def build_and_train(data: MultimodalDataset, cfg: RunConfig, objective: str = "elbo") -> TrainResult:
    rng = RngStream(cfg.seed)
    model = init_model(cfg.model_config(data.dims), rng)
    return train(model, data, cfg, rng, objective=objective)


def dataset_objective(model: MultimodalModel, data: MultimodalDataset, beta: float,
                      rng: RngStream | None, batch_size: int = 1000) -> float:
    """Objective averaged over a whole dataset (no gradients recorded)."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        b = objective_step(model, data.batch(idx), beta, None if rng is None else rng.split("eval", start))
        total += b.total * len(idx)
    return total / len(data)


def dataset_mse_bound(model: MultimodalModel, data: MultimodalDataset) -> float:
    return float(mse_bound(model, data.features).value)
