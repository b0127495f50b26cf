"""Diagonal Gaussians, Gaussian mixtures, fixed-scale likelihoods and divergences.

Distribution parameters are autodiff nodes (plain arrays are wrapped as
constants), so every density and divergence below is differentiable. A
distribution may carry leading batch axes: a ``DiagonalGaussian`` with mean
shape ``(B, d)`` represents ``B`` independent d-dimensional Gaussians, and
densities reduce over the last axis only.
"""
from __future__ import annotations

import math
import zlib
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractViolation, NumericError

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_CLAMP = (-10.0, 10.0)


class RngStream:
    """Seeded Philox stream that splits deterministically by label.

    A child stream depends only on the root seed and the sequence of split
    labels, never on how many numbers the parent has produced.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    @staticmethod
    def _label_key(label) -> int:
        if isinstance(label, (int, np.integer)):
            if label < 0:
                raise ContractViolation("integer split labels must be non-negative")
            return int(label)
        return zlib.crc32(str(label).encode("utf-8"))

    def split(self, *labels) -> RngStream:
        return RngStream(self.seed, self.path + tuple(self._label_key(x) for x in labels))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def get_state(self) -> dict:
        """JSON-serializable snapshot, restorable with :meth:`from_state`."""
        def plain(x):
            if isinstance(x, dict):
                return {k: plain(v) for k, v in x.items()}
            if isinstance(x, np.ndarray):
                return [int(v) for v in x]
            return x
        return {"seed": self.seed, "path": list(self.path),
                "bit_generator": plain(self.generator.bit_generator.state)}

    @classmethod
    def from_state(cls, state: dict) -> RngStream:
        out = cls(state["seed"], state["path"])
        bg = state["bit_generator"]
        restored = {
            "bit_generator": bg["bit_generator"],
            "state": {k: np.array(v, dtype=np.uint64) for k, v in bg["state"].items()},
            "buffer": np.array(bg["buffer"], dtype=np.uint64),
            "buffer_pos": bg["buffer_pos"],
            "has_uint32": bg["has_uint32"],
            "uinteger": bg["uinteger"],
        }
        out.generator.bit_generator.state = restored
        return out


class DiagonalGaussian:
    """Factorized Gaussian with (possibly batched) mean and stddev of equal shape."""

    __slots__ = ("mean", "stddev")

    def __init__(self, mean, stddev):
        self.mean = ad.as_node(mean)
        self.stddev = ad.as_node(stddev)
        if self.mean.value.shape != self.stddev.value.shape or self.mean.value.ndim == 0:
            raise ContractViolation(
                f"mean {self.mean.value.shape} and stddev {self.stddev.value.shape} must share a non-scalar shape")
        sd = self.stddev.value
        if not (np.isfinite(sd).all() and np.isfinite(self.mean.value).all()):
            raise NumericError("non-finite mean or stddev")
        if not np.all(sd > 0):
            raise ContractViolation("stddev must be strictly positive")

    @classmethod
    def from_logvar(cls, mean, logvar, clamp: tuple[float, float] = LOGVAR_CLAMP) -> DiagonalGaussian:
        return cls(mean, ad.exp(0.5 * ad.clip(logvar, *clamp)))

    @property
    def dim(self) -> int:
        return self.mean.value.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.mean.value.shape

    def detach(self) -> DiagonalGaussian:
        return DiagonalGaussian(self.mean.value, self.stddev.value)

    def __repr__(self) -> str:
        return f"DiagonalGaussian(shape={self.shape})"


class GaussianMixture:
    """Weighted mixture of diagonal Gaussians that share one shape."""

    __slots__ = ("components", "weights")

    def __init__(self, components: Sequence[DiagonalGaussian], weights: Sequence[float] | None = None):
        components = list(components)
        if not components:
            raise ContractViolation("a mixture needs at least one component")
        shape = components[0].shape
        if any(c.shape != shape for c in components):
            raise ContractViolation("all mixture components must share a shape")
        if weights is None:
            weights = np.full(len(components), 1.0 / len(components))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(components),):
            raise ContractViolation("need exactly one weight per component")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ContractViolation("weights must be non-negative and sum to 1")
        self.components = components
        self.weights = weights

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def __len__(self) -> int:
        return len(self.components)


class LaplaceLikelihood:
    __slots__ = ("location", "scale")

    def __init__(self, location, scale: float = 0.75):
        if not scale > 0:
            raise ContractViolation("Laplace scale must be positive")
        self.location = ad.as_node(location)
        self.scale = float(scale)


def _check_dim(g: DiagonalGaussian, z) -> None:
    if ad.value_of(z).shape[-1:] != (g.dim,):
        raise ContractViolation(f"dimension mismatch: distribution has d={g.dim}, "
                                f"point has shape {ad.value_of(z).shape}")


def sample_reparam(g: DiagonalGaussian, rng: RngStream | None = None, *,
                   eps=None, n_samples: int | None = None) -> Node:
    """``mean + stddev * eps`` with ``eps ~ N(0, I)``.

    Noise comes from ``eps`` when given (test hook; zeros give the mean),
    otherwise from ``rng``; ``n_samples`` prepends a sample axis.
    """
    if eps is None:
        if rng is None:
            raise ContractViolation("sample_reparam needs rng or eps")
        shape = g.shape if n_samples is None else (n_samples, *g.shape)
        eps = rng.normal(shape)
    return ad.add(g.mean, ad.mul(g.stddev, eps))


def gaussian_log_prob(g: DiagonalGaussian, z) -> Node:
    _check_dim(g, z)
    r = ad.div(ad.sub(z, g.mean), g.stddev)
    per_dim = ad.add(ad.mul(-0.5, ad.square(r)), ad.sub(-0.5 * LOG_2PI, ad.log(g.stddev)))
    return ad.sum(per_dim, axis=-1)


def gaussian_entropy(g: DiagonalGaussian) -> Node:
    return ad.sum(ad.add(0.5 * (LOG_2PI + 1.0), ad.log(g.stddev)), axis=-1)


def kl_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> Node:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.dim != p.dim:
        raise ContractViolation(f"dimension mismatch: {q.dim} vs {p.dim}")
    ratio = ad.square(ad.div(q.stddev, p.stddev))
    shift = ad.square(ad.div(ad.sub(q.mean, p.mean), p.stddev))
    per_dim = ad.mul(0.5, ad.sub(ad.add(ratio, shift), ad.add(1.0, ad.log(ratio))))
    return ad.sum(per_dim, axis=-1)


def kl_standard_normal(q: DiagonalGaussian) -> Node:
    """KL(q || N(0, I)); same value as kl_gaussian against a unit Gaussian."""
    var = ad.square(q.stddev)
    per_dim = ad.mul(0.5, ad.sub(ad.add(var, ad.square(q.mean)), ad.add(1.0, ad.log(var))))
    return ad.sum(per_dim, axis=-1)


def mixture_log_prob(mix: GaussianMixture, z) -> Node:
    _check_dim(mix.components[0], z)
    terms = [ad.add(gaussian_log_prob(c, z), math.log(w)) if w > 0 else None
             for c, w in zip(mix.components, mix.weights)]
    terms = [t for t in terms if t is not None]
    return ad.logsumexp(ad.stack(terms, axis=-1), axis=-1)


NOISE_SCHEMES = ("iid", "latin-hypercube")


def latin_hypercube_normal(shape: tuple, n_samples: int, rng: RngStream) -> np.ndarray:
    """Standard-normal draws of shape ``(n_samples, *shape)`` stratified per coordinate.

    Each coordinate gets exactly one draw in each of ``n_samples`` equal
    probability strata, paired across coordinates by independent random
    permutations. Every draw is still marginally N(0, 1), so sample means stay
    unbiased, with far lower variance than i.i.d. draws for smooth integrands.
    """
    from scipy.special import ndtri

    k = int(np.prod(shape, dtype=np.int64))
    g = rng.generator
    strata = np.argsort(g.random((k, n_samples)), axis=1).T
    u = (strata + g.random((n_samples, k))) / n_samples
    return ndtri(u).reshape(n_samples, *shape)


def draw_noise(components: Sequence[DiagonalGaussian], n_samples: int, rng: RngStream,
               scheme: str = "iid") -> list[np.ndarray]:
    """One standard-normal block of shape ``(n_samples, *shape)`` per component, in order."""
    if scheme == "iid":
        return [rng.normal((n_samples, *c.shape)) for c in components]
    if scheme == "latin-hypercube":
        return [latin_hypercube_normal(c.shape, n_samples, rng.split("lhs", m)) for m, c in enumerate(components)]
    raise ContractViolation(f"noise scheme must be one of {NOISE_SCHEMES}, got {scheme!r}")


def kl_to_mixture(q: DiagonalGaussian, mix: GaussianMixture, n_samples: int = 1,
                  rng: RngStream | None = None, *, eps=None,
                  stop_prior_gradient: bool = False) -> Node:
    """Monte-Carlo KL(q || mix) as the sample mean of ``log q(z) - log mix(z)``, z ~ q.

    The log-ratio is evaluated on the same reparameterized samples for both
    densities, so the estimate is exactly zero whenever ``mix`` equals ``q``.
    ``eps`` (shape ``(n, *q.shape)``) fixes the noise; otherwise it is drawn
    from ``rng``. The result keeps q's batch axes.
    """
    if eps is None:
        if n_samples < 1:
            raise ContractViolation("n_samples must be at least 1")
        if rng is None:
            raise ContractViolation("kl_to_mixture needs rng or eps")
        eps = rng.normal((n_samples, *q.shape))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[1:] != q.shape or eps.shape[0] < 1:
        raise ContractViolation(f"noise shape {eps.shape} does not match (n, *{q.shape})")
    if mix.dim != q.dim:
        raise ContractViolation(f"dimension mismatch: q has d={q.dim}, mixture has d={mix.dim}")
    if stop_prior_gradient:
        mix = GaussianMixture([c.detach() for c in mix.components], mix.weights)
    z = sample_reparam(q, eps=eps)
    log_ratio = ad.sub(gaussian_log_prob(q, z), mixture_log_prob(mix, z))
    return ad.mean(log_ratio, axis=0)


def js_divergence(components: Sequence[DiagonalGaussian], n_samples: int = 1,
                  rng: RngStream | None = None, *, eps: Sequence[np.ndarray] | None = None) -> Node:
    """Generalized Jensen-Shannon divergence with uniform weights.

    ``(1/M) sum_m KL(q_m || (1/M) sum_k q_k)``, each KL estimated by
    :func:`kl_to_mixture`. ``eps`` supplies per-component noise as returned
    by :func:`draw_noise`.
    """
    components = list(components)
    if not components:
        raise ContractViolation("JS divergence of an empty sequence is undefined")
    if eps is None:
        if rng is None:
            raise ContractViolation("js_divergence needs rng or eps")
        if n_samples < 1:
            raise ContractViolation("n_samples must be at least 1")
        eps = draw_noise(components, n_samples, rng)
    mix = GaussianMixture(components)
    total = None
    for q, e in zip(components, eps):
        term = kl_to_mixture(q, mix, eps=e)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(components))


def product_of_gaussians(components: Sequence[DiagonalGaussian]) -> DiagonalGaussian:
    """Normalized product of Gaussian densities: precisions add, means are precision-weighted."""
    components = list(components)
    if not components:
        raise ContractViolation("product of an empty sequence is undefined")
    if len(components) == 1:
        return components[0]
    shape = components[0].shape
    if any(c.shape != shape for c in components):
        raise ContractViolation("all experts must share a shape")
    precision = None
    weighted = None
    for c in components:
        prec = ad.div(1.0, ad.square(c.stddev))
        pm = ad.mul(prec, c.mean)
        precision = prec if precision is None else ad.add(precision, prec)
        weighted = pm if weighted is None else ad.add(weighted, pm)
    return DiagonalGaussian(ad.div(weighted, precision), ad.sqrt(ad.div(1.0, precision)))


def laplace_log_prob(lik: LaplaceLikelihood, x) -> Node:
    if ad.value_of(x).shape[-1:] != lik.location.value.shape[-1:]:
        raise ContractViolation(f"dimension mismatch: location {lik.location.value.shape}, "
                                f"point {ad.value_of(x).shape}")
    b = lik.scale
    dev = ad.absolute(ad.sub(x, lik.location))
    return ad.sum(ad.sub(-math.log(2.0 * b), ad.mul(dev, 1.0 / b)), axis=-1)


def fixed_gaussian_log_prob(location, x, scale: float = 1.0) -> Node:
    """Log density of x under N(location, scale^2 I), summed over the last axis."""
    if ad.value_of(x).shape[-1:] != ad.value_of(location).shape[-1:]:
        raise ContractViolation(f"dimension mismatch: location {ad.value_of(location).shape}, "
                                f"point {ad.value_of(x).shape}")
    r = ad.sub(x, location)
    per_dim = ad.sub(-0.5 * LOG_2PI - math.log(scale), ad.mul(0.5 / scale ** 2, ad.square(r)))
    return ad.sum(per_dim, axis=-1)
