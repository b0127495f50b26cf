"""Multimodal VAE with one MLP encoder and decoder per modality.

Parameter names are ``enc.<modality>.W<i>`` / ``dec.<modality>.W<i>``; the
modality name also keys every random stream the model consumes, so a
modality behaves identically whether it is trained alone or alongside
others.
"""
from __future__ import annotations

import json
import struct
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aggregation import aggregate, check_strategy
from .autodiff import Node, ParameterSet
from .distributions import (
    DiagonalGaussian,
    LaplaceLikelihood,
    RngStream,
    fixed_gaussian_log_prob,
    laplace_log_prob,
    sample_reparam,
)
from .errors import ConfigError, ContractViolation, FormatError

LIKELIHOODS = ("gaussian-fixed-scale", "laplace-fixed-scale")
CHECKPOINT_MAGIC = b"MMCK1"
CHECKPOINT_VERSION = 1
INIT_SCHEME = "uniform(+-1/sqrt(fan_in)) weights, zero biases, zero logvar head"


@dataclass
class ModelConfig:
    input_dims: tuple[int, ...]
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    likelihood: str = "gaussian-fixed-scale"
    scale: float = 1.0
    strategy: str = "mmvm"
    activation: str = "relu"
    modality_names: tuple[str, ...] | None = None
    include_prior_expert: bool = True
    stop_prior_gradient: bool = False

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.modality_names is None:
            self.modality_names = tuple(f"m{i}" for i in range(len(self.input_dims)))
        self.modality_names = tuple(str(n) for n in self.modality_names)
        self.validate()

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)

    def validate(self) -> None:
        if self.n_modalities < 1:
            raise ConfigError("need at least one modality")
        if any(d < 1 for d in self.input_dims):
            raise ConfigError(f"input dims must be positive, got {self.input_dims}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be a non-empty list of positive ints")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"likelihood must be one of {LIKELIHOODS}, got {self.likelihood!r}")
        if not self.scale > 0:
            raise ConfigError("likelihood scale must be positive")
        check_strategy(self.strategy)
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ad.ACTIVATIONS}")
        if len(self.modality_names) != self.n_modalities or len(set(self.modality_names)) != self.n_modalities:
            raise ConfigError("modality_names must be unique and match the number of modalities")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_dims", "hidden", "modality_names"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MultimodalModel:
    config: ModelConfig
    params: ParameterSet = field(repr=False)

    def encoder_widths(self, m: int) -> tuple[int, ...]:
        c = self.config
        return (c.input_dims[m], *c.hidden, 2 * c.latent_dim)

    def decoder_widths(self, m: int) -> tuple[int, ...]:
        c = self.config
        return (c.latent_dim, *c.hidden, c.input_dims[m])

    def name(self, m: int) -> str:
        self._check_index(m)
        return self.config.modality_names[m]

    def _check_index(self, m: int) -> None:
        if not 0 <= m < self.config.n_modalities:
            raise ContractViolation(f"modality index {m} out of range for M={self.config.n_modalities}")

    def select(self, modalities: Sequence[int]) -> MultimodalModel:
        """Sub-model over the given modalities; parameters are copied, not shared."""
        c = self.config
        cfg = ModelConfig(**{**c.to_dict(),
                             "input_dims": [c.input_dims[m] for m in modalities],
                             "modality_names": [c.modality_names[m] for m in modalities]})
        params = ParameterSet()
        for m in modalities:
            for role in ("enc", "dec"):
                for k, v in self.params.subset(f"{role}.{c.modality_names[m]}.").items():
                    params.add(k, v.copy())
        return MultimodalModel(cfg, params)


def init_model(config: ModelConfig, rng: RngStream) -> MultimodalModel:
    params = ParameterSet()
    d = config.latent_dim
    model = MultimodalModel(config, params)
    for m, name in enumerate(config.modality_names):
        enc = ad.init_mlp(model.encoder_widths(m), rng.split("init", "enc", name).generator, f"enc.{name}.")
        head = f"enc.{name}.W{len(config.hidden)}"
        w = enc[head].copy()
        w[:, d:] = 0.0  # logvar head starts at 0, i.e. unit stddev
        enc[head] = w
        dec = ad.init_mlp(model.decoder_widths(m), rng.split("init", "dec", name).generator, f"dec.{name}.")
        for part in (enc, dec):
            for k, v in part.items():
                params.add(k, v)
    return model


def _params(model: MultimodalModel, params: Mapping | None) -> Mapping:
    return model.params.constants() if params is None else params


def encode(model: MultimodalModel, m: int, x, params: Mapping | None = None) -> DiagonalGaussian:
    """Posterior for modality ``m``; stddev is ``exp(0.5 * clamp(logvar, -10, 10))``."""
    model._check_index(m)
    c = model.config
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, Node) else x
    if ad.value_of(x).shape[-1:] != (c.input_dims[m],):
        raise ContractViolation(f"modality {m} expects dim {c.input_dims[m]}, got shape {ad.value_of(x).shape}")
    out = ad.forward_mlp(_params(model, params), x, model.encoder_widths(m), c.activation,
                         prefix=f"enc.{c.modality_names[m]}.")
    d = c.latent_dim
    return DiagonalGaussian.from_logvar(out[..., :d], out[..., d:])


def decode(model: MultimodalModel, m: int, z, params: Mapping | None = None) -> Node:
    model._check_index(m)
    c = model.config
    if ad.value_of(z).shape[-1:] != (c.latent_dim,):
        raise ContractViolation(f"latent must have dim {c.latent_dim}, got shape {ad.value_of(z).shape}")
    return ad.forward_mlp(_params(model, params), z, model.decoder_widths(m), c.activation,
                          prefix=f"dec.{c.modality_names[m]}.")


def log_likelihood(model: MultimodalModel, x, location) -> Node:
    c = model.config
    if c.likelihood == "laplace-fixed-scale":
        return laplace_log_prob(LaplaceLikelihood(location, c.scale), x)
    return fixed_gaussian_log_prob(location, x, c.scale)


def _noise(rng: RngStream | None, shape: tuple, *labels) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    return rng.split(*labels).normal(shape)


def latent_paths(model: MultimodalModel, posteriors: Sequence[DiagonalGaussian],
                 rng: RngStream | None) -> tuple[list[list[Node]], object]:
    """Latent samples that feed each decoder under the model's strategy.

    Returns ``(paths, joint)`` where ``paths[m]`` lists the samples decoded by
    decoder ``m`` (their likelihoods are averaged) and ``joint`` is the
    aggregated object, if any. ``rng=None`` means zero noise.
    """
    c = model.config
    bundle = aggregate(c.strategy, posteriors, include_prior_expert=c.include_prior_expert)
    M = c.n_modalities
    if c.strategy in ("independent", "mmvm"):
        paths = [[sample_reparam(q, eps=_noise(rng, q.shape, "latent", c.modality_names[m]))]
                 for m, q in enumerate(posteriors)]
    elif c.strategy in ("avg", "poe"):
        q = bundle.joint
        z = sample_reparam(q, eps=_noise(rng, q.shape, "joint"))
        paths = [[z] for _ in range(M)]
    else:
        zs = [sample_reparam(q, eps=_noise(rng, q.shape, "component", k))
              for k, q in enumerate(bundle.joint.components)]
        paths = [list(zs) for _ in range(M)]
    return paths, bundle.joint


def _check_sample(model: MultimodalModel, X: Sequence) -> None:
    if len(X) != model.config.n_modalities:
        raise ContractViolation(
            f"sample has {len(X)} modalities, model expects all {model.config.n_modalities}")
    for m, x in enumerate(X):
        if x is None:
            raise ContractViolation(f"modality {m} is missing; training requires complete sets")


def decode_paths(model: MultimodalModel, m: int, x, zs: Sequence[Node],
                 params: Mapping | None = None) -> tuple[Node, Node]:
    """Decode every latent in ``zs`` with decoder ``m``; average locations and log-likelihoods.

    Several latents are decoded in one batched pass.
    """
    p = _params(model, params)
    if len(zs) == 1:
        loc = decode(model, m, zs[0], p)
        return loc, log_likelihood(model, x, loc)
    k = len(zs)
    batch = zs[0].value.shape[:-1]
    d = model.config.latent_dim
    flat = ad.reshape(ad.stack(zs, axis=0), (-1, d))
    loc = decode(model, m, flat, p)
    loc = ad.reshape(loc, (k, *batch, loc.value.shape[-1]))
    ll = log_likelihood(model, x, loc)
    return ad.mean(loc, axis=0), ad.mean(ll, axis=0)


def reconstruct(model: MultimodalModel, X: Sequence, rng: RngStream | None,
                params: Mapping | None = None) -> list[tuple[Node, Node]]:
    """Per-modality ``(location, log-likelihood)`` under the strategy's routing.

    When a modality is decoded from several latent samples (MoE/MoPoE) the
    location and the log-likelihood are both averages over the samples.
    """
    _check_sample(model, X)
    p = _params(model, params)
    posteriors = [encode(model, m, x, p) for m, x in enumerate(X)]
    paths, _ = latent_paths(model, posteriors, rng)
    return [decode_paths(model, m, x, paths[m], p) for m, x in enumerate(X)]


def conditional_generate(model: MultimodalModel, source: int, target: int, x,
                         rng: RngStream | None = None, deterministic: bool = False) -> np.ndarray:
    """Encode with encoder ``source``, sample (or take the mean), decode with decoder ``target``."""
    model._check_index(source)
    model._check_index(target)
    q = encode(model, source, x)
    if deterministic:
        z = q.mean
    else:
        if rng is None:
            raise ContractViolation("stochastic generation needs an rng (or deterministic=True)")
        z = sample_reparam(q, rng.split("generate", model.config.modality_names[source]))
    return decode(model, target, z).value


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_to_bytes(model: MultimodalModel, *, beta: float, seed: int, epoch: int,
                        rng_state: dict | None = None, extra: Mapping | None = None) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "strategy": model.config.strategy,
        "beta": float(beta),
        "seed": int(seed),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "init": INIT_SCHEME,
        "parameters": [[name, list(shape)] for name, shape in model.params.layout()],
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + model.params.to_bytes()


def checkpoint_from_bytes(buf: bytes) -> tuple[MultimodalModel, dict]:
    n_magic = len(CHECKPOINT_MAGIC)
    if buf[:n_magic] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < n_magic + 4:
        raise FormatError("truncated header length", n_magic)
    (hlen,) = struct.unpack_from("<I", buf, n_magic)
    start = n_magic + 4
    if len(buf) < start + hlen:
        raise FormatError("truncated header", len(buf))
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", start) from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')!r}", start)
    layout = [(name, tuple(shape)) for name, shape in header["parameters"]]
    body = buf[start + hlen:]
    expected = 8 * sum(int(np.prod(s)) for _, s in layout)
    if len(body) != expected:
        raise FormatError(f"parameter block has {len(body)} bytes, expected {expected}",
                          start + hlen + min(len(body), expected))
    params = ParameterSet.from_bytes(layout, body)
    config = ModelConfig.from_dict(header["model_config"])
    return MultimodalModel(config, params), header


def save_checkpoint(path, model: MultimodalModel, **kwargs) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, **kwargs))


def load_checkpoint(path) -> tuple[MultimodalModel, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())

