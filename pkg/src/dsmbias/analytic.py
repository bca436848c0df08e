"""Exact densities and scores for Gaussian families under a variance-exploding
forward process ``x_t = x + sigma_t * nu``.

Everything here is closed form (or Gauss-Hermite quadrature in 1D) and serves
as the ground truth the Monte-Carlo estimators in :mod:`dsmbias.objectives`
are checked against.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss

from dsmbias import faults, kernels
from dsmbias.errors import InvalidArgument, Unsupported

__all__ = [
    "NoiseSchedule",
    "DiagGaussian",
    "GaussianMixture",
    "NoisyEncoderModel",
    "perturb",
    "conditional_score",
    "marginal_log_density",
    "marginal_score",
    "marginal_score_hvp",
    "c2_closed_form",
    "c3_closed_form",
    "posterior_moments",
    "quadrature_expectation",
]


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: tuple[float, ...]

    def __init__(self, sigmas: Sequence[float]):
        sig = tuple(float(s) for s in np.atleast_1d(sigmas))
        if not sig:
            raise InvalidArgument("noise schedule must contain at least one level")
        if any(not np.isfinite(s) or s <= 0 for s in sig):
            raise InvalidArgument(f"noise levels must be finite and > 0, got {sig}")
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise InvalidArgument(f"noise levels must be strictly increasing, got {sig}")
        object.__setattr__(self, "sigmas", sig)

    def __len__(self) -> int:
        return len(self.sigmas)

    def __iter__(self):
        return iter(self.sigmas)

    def index(self, sigma: float) -> int:
        """Position of ``sigma`` in the schedule (relative match at 1e-12)."""
        for i, s in enumerate(self.sigmas):
            if abs(s - sigma) <= 1e-12 * max(s, abs(sigma)):
                return i
        raise InvalidArgument(f"noise level {sigma!r} is not in the schedule {self.sigmas}")


@dataclass(frozen=True)
class DiagGaussian:
    """Axis-aligned Gaussian ``N(mean, diag(exp(log_std)**2))``."""

    mean: np.ndarray
    log_std: np.ndarray

    def __init__(self, mean, log_std):
        mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        log_std = np.atleast_1d(np.asarray(log_std, dtype=float)).copy()
        if mean.ndim != 1 or mean.shape != log_std.shape or mean.size < 1:
            raise InvalidArgument(
                f"mean and log_std must be vectors of equal length >= 1, got {mean.shape} and {log_std.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
            raise InvalidArgument("mean and log_std must be finite")
        mean.flags.writeable = False
        log_std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @classmethod
    def from_std(cls, mean, std) -> "DiagGaussian":
        std = np.atleast_1d(np.asarray(std, dtype=float))
        if np.any(std <= 0):
            raise InvalidArgument("standard deviations must be strictly positive")
        return cls(mean, np.log(std))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_std)

    def as_mixture(self) -> "GaussianMixture":
        return GaussianMixture([1.0], [self])

    def noised(self, sigma_t: float) -> "DiagGaussian":
        return DiagGaussian.from_std(self.mean, np.sqrt(self.var + sigma_t**2))

    def __eq__(self, other):
        return (
            isinstance(other, DiagGaussian)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.log_std, other.log_std)
        )

    def __hash__(self):
        return hash((self.mean.tobytes(), self.log_std.tobytes()))


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    components: tuple[DiagGaussian, ...]

    def __init__(self, weights, components: Sequence[DiagGaussian]):
        w = np.atleast_1d(np.asarray(weights, dtype=float)).copy()
        comps = tuple(components)
        if w.ndim != 1 or w.size != len(comps) or w.size == 0:
            raise InvalidArgument("need one weight per component and at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgument(f"weights must be nonnegative and sum to 1, got {w}")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise InvalidArgument(f"components disagree on dimension: {sorted(dims)}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @classmethod
    def symmetric(cls, offset: float, std: float, dim: int = 1) -> "GaussianMixture":
        """Equal-weight pair of isotropic components at ``+-offset`` on every axis."""
        lo = DiagGaussian.from_std(np.full(dim, -offset), np.full(dim, std))
        hi = DiagGaussian.from_std(np.full(dim, offset), np.full(dim, std))
        return cls([0.5, 0.5], [lo, hi])

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def variances(self) -> np.ndarray:
        return np.stack([c.var for c in self.components])

    def noised(self, sigma_t: float) -> "GaussianMixture":
        return GaussianMixture(self.weights, [c.noised(sigma_t) for c in self.components])

    def __eq__(self, other):
        return (
            isinstance(other, GaussianMixture)
            and np.array_equal(self.weights, other.weights)
            and self.components == other.components
        )

    def __hash__(self):
        return hash((self.weights.tobytes(), self.components))


def as_mixture(dist) -> GaussianMixture:
    if isinstance(dist, GaussianMixture):
        return dist
    if isinstance(dist, DiagGaussian):
        return dist.as_mixture()
    raise InvalidArgument(f"expected DiagGaussian or GaussianMixture, got {type(dist).__name__}")


@dataclass(frozen=True)
class NoisyEncoderModel:
    """Condition ``c = alpha * x + beta * eta`` with ``x ~ prior`` and standard-normal ``eta``.

    Joint Gaussianity makes ``p(x | c)`` an exact axis-aligned Gaussian.
    """

    alpha: float
    beta: float
    prior: DiagGaussian

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise InvalidArgument("alpha must be finite")
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise InvalidArgument(f"beta must be > 0, got {self.beta}")

    @property
    def dim(self) -> int:
        return self.prior.dim

    def posterior_variance(self) -> np.ndarray:
        s0sq = self.prior.var
        return s0sq * self.beta**2 / (self.alpha**2 * s0sq + self.beta**2)

    def posterior_gain(self) -> np.ndarray:
        """Coefficient ``k`` in ``E[x | c] = mu0 + k * (c - alpha * mu0)``."""
        s0sq = self.prior.var
        return self.alpha * s0sq / (self.alpha**2 * s0sq + self.beta**2)

    def conditional(self, c) -> DiagGaussian:
        mean, var = posterior_moments(self, c)
        return DiagGaussian.from_std(mean, np.sqrt(var))


def _check_sigma(sigma_t: float) -> float:
    sigma_t = float(sigma_t)
    if not (sigma_t > 0 and np.isfinite(sigma_t)):
        raise InvalidArgument(f"sigma_t must be finite and > 0, got {sigma_t}")
    return sigma_t


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgument(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def perturb(x, sigma_t: float, noise) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    _check_same_shape(x, noise, "perturb")
    return x + _check_sigma(sigma_t) * noise


def conditional_score(x_t, x, sigma_t: float) -> np.ndarray:
    """Score of the Gaussian transition kernel, ``-(x_t - x) / sigma_t**2``."""
    x_t = np.asarray(x_t, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_same_shape(x_t, x, "conditional_score")
    return -(x_t - x) / _check_sigma(sigma_t) ** 2


def _mixture_arrays(dist, sigma_t: float):
    mix = as_mixture(dist)
    sigma_t = _check_sigma(sigma_t)
    with np.errstate(divide="ignore"):
        log_w = np.log(mix.weights)
    return mix.means, mix.variances + sigma_t**2, log_w


def _as_batch(dist, x_t) -> tuple[np.ndarray, bool]:
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    xb = np.atleast_2d(x_t)
    d = as_mixture(dist).dim
    if xb.ndim != 2 or xb.shape[1] != d:
        raise InvalidArgument(f"x_t has shape {x_t.shape}, distribution has dimension {d}")
    return np.ascontiguousarray(xb), single


def marginal_log_density(dist, x_t, sigma_t: float):
    """log of ``sum_k w_k N(x_t; mu_k, diag(s_k^2) + sigma_t^2 I)``.

    ``x_t`` may be a single point ``(d,)`` or a batch ``(n, d)``.
    """
    means, var, log_w = _mixture_arrays(dist, sigma_t)
    xb, single = _as_batch(dist, x_t)
    logp, _ = kernels.mixture_logpdf_score(xb, means, var, log_w)
    return float(logp[0]) if single else logp


def marginal_score(dist, x_t, sigma_t: float) -> np.ndarray:
    """Exact ``grad_{x_t} log q(x_t)``: posterior-weighted sum of the noised component scores."""
    means, var, log_w = _mixture_arrays(dist, sigma_t)
    xb, single = _as_batch(dist, x_t)
    _, score = kernels.mixture_logpdf_score(xb, means, var, log_w)
    return score[0] if single else score


def marginal_score_hvp(dist, x_t, sigma_t: float, upstream) -> np.ndarray:
    """``H(x_t)^T u`` where ``H`` is the Hessian of ``log q(x_t)`` (symmetric, so also ``H u``)."""
    means, var, log_w = _mixture_arrays(dist, sigma_t)
    xb, single = _as_batch(dist, x_t)
    ub = np.ascontiguousarray(np.atleast_2d(np.asarray(upstream, dtype=float)))
    if ub.shape != xb.shape:
        raise InvalidArgument(f"upstream shape {ub.shape} does not match x_t {xb.shape}")
    out = kernels.mixture_score_hvp(xb, means, var, log_w, ub)
    return out[0] if single else out


def c2_closed_form(dist: DiagGaussian, sigma_t: float) -> float:
    """``E[0.5 * |grad log q(x_t)|^2]`` for a Gaussian source: ``sum_i 1 / (2 (s_i^2 + sigma_t^2))``."""
    sigma_t = _check_sigma(sigma_t)
    return faults.c2_factor() * float(np.sum(0.5 / (dist.var + sigma_t**2)))


def c3_closed_form(d: int, sigma_t: float) -> float:
    """``E[0.5 * |grad log q(x_t | x)|^2] = d / (2 sigma_t^2)``."""
    if int(d) != d or d < 1:
        raise InvalidArgument(f"d must be a positive integer, got {d}")
    return float(d) / (2.0 * _check_sigma(sigma_t) ** 2)


def posterior_moments(model: NoisyEncoderModel, c):
    """Mean and variance of ``x | c``; scalars in 1D, per-axis arrays otherwise."""
    c = np.asarray(c, dtype=float)
    mu0 = model.prior.mean
    k = model.posterior_gain()
    mean = mu0 + k * (c - model.alpha * mu0)
    var = model.posterior_variance()
    if model.dim == 1 and c.ndim == 0:
        return float(mean[0]), float(var[0])
    return mean, np.broadcast_to(var, np.shape(mean)).copy()


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gh_standard_normal(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    if nodes not in _GH_CACHE:
        x, w = hermgauss(nodes)
        _GH_CACHE[nodes] = (np.sqrt(2.0) * x, w / np.sqrt(np.pi))
    return _GH_CACHE[nodes]


def quadrature_expectation(f: Callable[[np.ndarray], np.ndarray], dist, nodes: int = 96) -> float:
    """``E_{x ~ dist}[f(x)]`` for a 1D mixture by per-component Gauss-Hermite.

    ``f`` receives a 1D array of abscissae and must return values of the same
    length.
    """
    mix = as_mixture(dist)
    if mix.dim != 1:
        raise Unsupported("quadrature_expectation is 1D only; use Monte Carlo for d > 1")
    if nodes < 16:
        raise InvalidArgument(f"need at least 16 nodes, got {nodes}")
    z, w = _gh_standard_normal(int(nodes))
    total = 0.0
    for wk, comp in zip(mix.weights, mix.components):
        if wk == 0.0:
            continue
        xs = comp.mean[0] + comp.std[0] * z
        vals = np.asarray(f(xs), dtype=float).reshape(-1)
        total += wk * float(np.dot(w, vals))
    return total
