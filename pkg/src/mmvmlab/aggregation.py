"""Ways of combining unimodal posteriors into a joint object.

``independent`` and ``mmvm`` keep the unimodal posteriors separate (the
latter ties them through :func:`mmvm_prior`); ``avg`` and ``poe`` collapse
them into one Gaussian; ``moe`` and ``mopoe`` build mixtures.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .distributions import DiagonalGaussian, GaussianMixture, product_of_gaussians
from .errors import ConfigError, ContractViolation

STRATEGIES = ("independent", "avg", "moe", "poe", "mopoe", "mmvm")
MAX_MOPOE_MODALITIES = 10


def check_strategy(tag: str) -> str:
    if tag not in STRATEGIES:
        raise ConfigError(f"unknown strategy {tag!r}; expected one of {'|'.join(STRATEGIES)}")
    return tag


def _check_bundle(unimodal: Sequence[DiagonalGaussian]) -> list[DiagonalGaussian]:
    unimodal = list(unimodal)
    if not unimodal:
        raise ContractViolation("need at least one unimodal posterior")
    shape = unimodal[0].shape
    for m, q in enumerate(unimodal):
        if q.shape != shape:
            raise ContractViolation(f"posterior {m} has shape {q.shape}, expected {shape}")
    return unimodal


@dataclass
class PosteriorBundle:
    unimodal: list[DiagonalGaussian]
    joint: DiagonalGaussian | GaussianMixture | None = None

    def __post_init__(self):
        self.unimodal = _check_bundle(self.unimodal)

    @property
    def dim(self) -> int:
        return self.unimodal[0].dim


def aggregate_avg(unimodal: Sequence[DiagonalGaussian]) -> DiagonalGaussian:
    """Arithmetic mean of the means and of the standard deviations."""
    unimodal = _check_bundle(unimodal)
    if len(unimodal) == 1:
        return unimodal[0]
    scale = 1.0 / len(unimodal)
    mean = ad.mul(ad.sum(ad.stack([q.mean for q in unimodal], axis=0), axis=0), scale)
    std = ad.mul(ad.sum(ad.stack([q.stddev for q in unimodal], axis=0), axis=0), scale)
    return DiagonalGaussian(mean, std)


def standard_normal_like(q: DiagonalGaussian) -> DiagonalGaussian:
    return DiagonalGaussian(np.zeros(q.shape), np.ones(q.shape))


def aggregate_poe(unimodal: Sequence[DiagonalGaussian], include_prior_expert: bool = True) -> DiagonalGaussian:
    unimodal = _check_bundle(unimodal)
    experts = list(unimodal)
    if include_prior_expert:
        experts.append(standard_normal_like(unimodal[0]))
    return product_of_gaussians(experts)


def aggregate_moe(unimodal: Sequence[DiagonalGaussian]) -> GaussianMixture:
    return GaussianMixture(_check_bundle(unimodal))


def modality_subsets(n_modalities: int) -> list[tuple[int, ...]]:
    """All non-empty subsets, ordered by size and then lexicographically."""
    return [s for k in range(1, n_modalities + 1) for s in combinations(range(n_modalities), k)]


def aggregate_mopoe(unimodal: Sequence[DiagonalGaussian]) -> GaussianMixture:
    """Uniform mixture over the product of every non-empty subset (no prior expert)."""
    unimodal = _check_bundle(unimodal)
    if len(unimodal) > MAX_MOPOE_MODALITIES:
        raise ContractViolation(
            f"MoPoE enumerates 2^M - 1 subsets; refusing M={len(unimodal)} > {MAX_MOPOE_MODALITIES}")
    return GaussianMixture([product_of_gaussians([unimodal[i] for i in s])
                            for s in modality_subsets(len(unimodal))])


def mmvm_prior(unimodal: Sequence[DiagonalGaussian]) -> GaussianMixture:
    """Uniform mixture of all unimodal posteriors; shared as the prior of every modality."""
    return GaussianMixture(_check_bundle(unimodal))


def aggregate(strategy: str, unimodal: Sequence[DiagonalGaussian], *,
              include_prior_expert: bool = True) -> PosteriorBundle:
    check_strategy(strategy)
    if strategy == "avg":
        joint = aggregate_avg(unimodal)
    elif strategy == "poe":
        joint = aggregate_poe(unimodal, include_prior_expert)
    elif strategy == "moe":
        joint = aggregate_moe(unimodal)
    elif strategy == "mopoe":
        joint = aggregate_mopoe(unimodal)
    elif strategy == "mmvm":
        joint = mmvm_prior(unimodal)
    else:
        joint = None
    return PosteriorBundle(list(unimodal), joint)
