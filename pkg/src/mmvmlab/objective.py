"""Beta-weighted training objectives and the autoencoder bound.

All values follow the maximize convention: ``total = sum(recon) - beta * rate``,
averaged over the minibatch. Training minimizes ``-total``.
"""
from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .distributions import (
    DiagonalGaussian,
    GaussianMixture,
    RngStream,
    kl_standard_normal,
    kl_to_mixture,
)
from .errors import ContractViolation
from .model import (
    MultimodalModel,
    _check_sample,
    _noise,
    _params,
    decode,
    decode_paths,
    encode,
    latent_paths,
    log_likelihood,
)

# Recorded in run metadata; these are choices, not properties of the method.
ESTIMATOR_NOTES = {
    "mmvm_rate": "log q(z) - log h(z) at the reconstruction sample (1 sample per modality)",
    "moe_rate": "component-averaged closed-form KL to N(0, I) (upper bound on mixture KL)",
    "moe_reconstruction": "one sample per mixture component, likelihoods averaged",
}


@dataclass
class ObjectiveBreakdown:
    recon: list[float]
    rate: float
    total: float
    beta: float
    node: Node | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"recon": list(self.recon), "rate": self.rate, "total": self.total, "beta": self.beta}


def _check_beta(beta: float) -> float:
    beta = float(beta)
    if not (math.isfinite(beta) and beta >= 0):
        raise ContractViolation(f"beta must be a finite non-negative number, got {beta}")
    return beta


def _batch_mean(x: Node) -> Node:
    return ad.mean(x) if x.value.ndim else x


def rate_terms(model: MultimodalModel, posteriors: Sequence[DiagonalGaussian], joint,
               noise: Sequence[np.ndarray] | None = None) -> Node:
    """Per-sample rate for the model's strategy (shape = batch shape).

    ``noise[m]`` is the standard-normal draw behind modality m's latent
    sample; the MMVM rate reuses it so that reconstruction and rate share
    one sample.
    """
    s = model.config.strategy
    if s == "independent":
        terms = [kl_standard_normal(q) for q in posteriors]
        return terms[0] if len(terms) == 1 else ad.sum(ad.stack(terms, axis=0), axis=0)
    if s in ("avg", "poe"):
        return kl_standard_normal(joint)
    if s in ("moe", "mopoe"):
        terms = [kl_standard_normal(c) for c in joint.components]
        return ad.mul(ad.sum(ad.stack(terms, axis=0), axis=0), 1.0 / len(terms))
    # mmvm
    mix: GaussianMixture = joint
    terms = [kl_to_mixture(q, mix, eps=noise[m][None],
                           stop_prior_gradient=model.config.stop_prior_gradient)
             for m, q in enumerate(posteriors)]
    return ad.sum(ad.stack(terms, axis=0), axis=0)


def objective_step(model: MultimodalModel, X: Sequence, beta: float, rng: RngStream | None,
                   params: Mapping | None = None) -> ObjectiveBreakdown:
    """Differentiable objective on one (mini)batch; ``rng=None`` means zero noise."""
    beta = _check_beta(beta)
    _check_sample(model, X)
    p = _params(model, params)
    c = model.config
    posteriors = [encode(model, m, x, p) for m, x in enumerate(X)]
    paths, joint = latent_paths(model, posteriors, rng)
    recon_nodes = []
    for m, x in enumerate(X):
        _, ll = decode_paths(model, m, x, paths[m], p)
        recon_nodes.append(_batch_mean(ll))
    recon_total = recon_nodes[0]
    for r in recon_nodes[1:]:
        recon_total = ad.add(recon_total, r)
    if beta == 0:
        # rate disabled: not computed, reported as zero
        return ObjectiveBreakdown([float(r.value) for r in recon_nodes], 0.0,
                                  float(recon_total.value), beta, recon_total)
    noise = None
    if c.strategy == "mmvm":
        # same draws latent_paths used for the reconstruction samples
        noise = [_noise(rng, q.shape, "latent", c.modality_names[m]) for m, q in enumerate(posteriors)]
    rate = _batch_mean(rate_terms(model, posteriors, joint, noise))
    total = ad.sub(recon_total, ad.mul(beta, rate))
    return ObjectiveBreakdown(
        recon=[float(r.value) for r in recon_nodes],
        rate=float(rate.value),
        total=float(total.value),
        beta=beta,
        node=total,
    )


def mse_bound(model: MultimodalModel, X: Sequence, params: Mapping | None = None) -> Node:
    """Sum over modalities of log p(x_m | decode(encoder mean)), averaged over the batch.

    No sampling and no rate: the deterministic-autoencoder value that upper
    bounds the objective once the encoder variance is optimized away.
    """
    _check_sample(model, X)
    p = _params(model, params)
    total = None
    for m, x in enumerate(X):
        q = encode(model, m, x, p)
        ll = _batch_mean(log_likelihood(model, x, decode(model, m, q.mean, p)))
        total = ll if total is None else ad.add(total, ll)
    return total


# ---------------------------------------------------------------------------
# Lemma check: the uniform mixture maximizes the cross-entropy functional


@dataclass
class Lemma1Report:
    mixture_value: float
    max_perturbed_value: float
    min_margin: float
    n_perturbations: int
    min_l1: float
    grid: np.ndarray = field(repr=False)
    mixture_masses: np.ndarray = field(repr=False)
    posterior_masses: np.ndarray = field(repr=False)


def _grid_masses(g: DiagonalGaussian, grid: np.ndarray) -> np.ndarray:
    mu, sd = float(g.mean.value.reshape(-1)[0]), float(g.stddev.value.reshape(-1)[0])
    dens = np.exp(-0.5 * ((grid - mu) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    masses = dens * (grid[1] - grid[0])
    return masses / masses.sum()


def cross_entropy_functional(posterior_masses: np.ndarray, prior_masses: np.ndarray) -> float:
    """Discretized sum_m E_{q_m}[log h] for cell masses (rows: modalities)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(posterior_masses > 0, posterior_masses * np.log(prior_masses), 0.0)
    return float(terms.sum())


def perturb_masses(masses: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative log-normal perturbation, renormalized to total mass 1."""
    out = masses * np.exp(scale * rng.standard_normal(masses.shape))
    return out / out.sum()


def verify_lemma1(bundle: Sequence[DiagonalGaussian], grid: tuple[float, float, int] | None = None,
                  n_perturbations: int = 100, min_l1: float = 0.01, seed: int = 0) -> Lemma1Report:
    """Compare the cross-entropy functional at the uniform mixture with random alternatives.

    ``grid`` is ``(low, high, n_points)`` and must cover 8 stddevs around every
    mean; by default it is built to do so with 2001 points. Each alternative
    prior is a normalized perturbation of the mixture whose L1 distance from
    it is at least ``min_l1``.
    """
    bundle = list(bundle)
    if not bundle or any(q.shape != (1,) for q in bundle):
        raise ContractViolation("verify_lemma1 expects a non-empty bundle of unbatched 1-D Gaussians")
    mus = np.array([float(q.mean.value[0]) for q in bundle])
    sds = np.array([float(q.stddev.value[0]) for q in bundle])
    lo_need, hi_need = float(np.min(mus - 8 * sds)), float(np.max(mus + 8 * sds))
    if grid is None:
        grid = (lo_need, hi_need, 2001)
    lo, hi, n = grid
    if n < 200:
        raise ContractViolation(f"grid of {n} points is too coarse (need at least 200)")
    if lo > lo_need or hi < hi_need:
        raise ContractViolation(f"grid [{lo}, {hi}] does not cover [{lo_need}, {hi_need}]")
    z = np.linspace(lo, hi, int(n))
    post = np.stack([_grid_masses(q, z) for q in bundle])
    mixture = post.mean(axis=0)
    base = cross_entropy_functional(post, mixture)
    gen = np.random.default_rng(seed)
    best, margin = -np.inf, np.inf
    for _ in range(n_perturbations):
        scale = gen.uniform(0.01, 1.0)
        cand = perturb_masses(mixture, scale, gen)
        while np.abs(cand - mixture).sum() < min_l1:
            scale *= 2.0
            cand = perturb_masses(mixture, scale, gen)
        val = cross_entropy_functional(post, cand)
        best = max(best, val)
        margin = min(margin, base - val)
    return Lemma1Report(base, best, margin, n_perturbations, min_l1, z, mixture, post)
