"""Monte-Carlo and closed-form estimators for the score-matching decomposition

    L_DSM = L_ESM - C2 + C3

and their gradients with respect to model parameters, conditions and source
distribution parameters. Every loss carries the factor 1/2.

All stochastic estimators consume a :class:`SampleBatch`; calling several of
them on the same batch couples them through common random numbers, so paired
differences have small variance. Draw order inside a batch is fixed: component
picks, then the standard-normal ``eps`` that builds ``x``, then the forward
noise ``nu``, then the encoder noise ``eta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dsmbias import faults
from dsmbias.analytic import (
    DiagGaussian,
    as_mixture,
    conditional_score,
    marginal_score,
)
from dsmbias.errors import InvalidArgument, Unsupported
from dsmbias.families import GaussianFamily, MixtureWeightFamily, PathwiseDraw
from dsmbias.models import ParamVector

__all__ = [
    "MCEstimate",
    "GradEstimate",
    "SampleBatch",
    "make_rng",
    "sample",
    "dsm_loss",
    "esm_loss",
    "c2_term",
    "c3_term",
    "cross_term_marginal",
    "cross_term_conditional",
    "decomposition_residual",
    "paired",
    "grad_theta",
    "theta_terms",
    "grad_theta_family",
    "grad_condition_total",
    "grad_distribution",
    "grad_mixture_weight",
    "family_estimates",
    "linear_closed_form",
    "linear_closed_form_grads",
]

OBJECTIVES = ("dsm", "esm", "c2", "c3")


@dataclass(frozen=True)
class MCEstimate:
    value: float
    std_error: float
    n: int
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_samples(cls, samples) -> "MCEstimate":
        samples = np.asarray(samples, dtype=float).reshape(-1)
        n = samples.size
        if n < 2:
            raise InvalidArgument(f"need at least 2 samples for a standard error, got {n}")
        return cls(float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n)), n, samples)

    def within(self, target: float, k: float = 3.0, floor: float = 1e-8) -> bool:
        return abs(self.value - target) <= k * self.std_error + floor

    def __str__(self) -> str:
        return f"{self.value:.6g} ± {self.std_error:.2g} (n={self.n})"


def paired(estimates: Sequence[MCEstimate], coeffs: Sequence[float]) -> MCEstimate:
    """Per-sample linear combination of estimates taken on the same batch (joint SE)."""
    if len(estimates) != len(coeffs) or not estimates:
        raise InvalidArgument("need one coefficient per estimate")
    if any(e.samples is None for e in estimates) or len({e.n for e in estimates}) != 1:
        raise InvalidArgument("paired combination needs per-sample values on a common batch")
    return MCEstimate.from_samples(sum(c * e.samples for c, e in zip(coeffs, estimates)))


@dataclass(frozen=True)
class GradEstimate:
    """Per-sample gradient rows ``(n, k)``; the estimate is their mean."""

    per_sample: np.ndarray = field(repr=False)
    layout: dict | None = None

    @property
    def n(self) -> int:
        return self.per_sample.shape[0]

    @property
    def value(self) -> np.ndarray:
        return self.per_sample.mean(axis=0)

    @property
    def std_error(self) -> np.ndarray:
        return self.per_sample.std(axis=0, ddof=1) / np.sqrt(self.n)

    def params(self) -> ParamVector:
        if self.layout is None:
            raise InvalidArgument("this gradient has no parameter layout")
        return ParamVector(self.value, dict(self.layout))

    def combine(self, others: Sequence["GradEstimate"], coeffs: Sequence[float]) -> "GradEstimate":
        """``coeffs[0] * self + sum(coeffs[i] * others[i-1])`` sample by sample."""
        rows = coeffs[0] * self.per_sample
        for c, g in zip(coeffs[1:], others):
            if g.per_sample.shape != self.per_sample.shape:
                raise InvalidArgument("gradients were not taken on a common batch")
            rows = rows + c * g.per_sample
        return GradEstimate(rows, self.layout)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator; ``stream`` entries split independent substreams off one seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(stream))))


@dataclass(frozen=True)
class SampleBatch:
    seed: int
    pick: np.ndarray = field(repr=False)  # (n,) uniforms for component choice
    eps: np.ndarray = field(repr=False)  # (n, d)
    nu: np.ndarray = field(repr=False)  # (n, d)
    eta: np.ndarray = field(repr=False)  # (n, e)

    @classmethod
    def generate(cls, seed: int, n: int, dim: int, eta_dim: int | None = None) -> "SampleBatch":
        if n < 2:
            raise InvalidArgument(f"batch size must be at least 2, got {n}")
        eta_dim = dim if eta_dim is None else eta_dim
        rng = make_rng(seed)
        pick = rng.random(n)
        eps = rng.standard_normal((n, dim))
        nu = rng.standard_normal((n, dim))
        eta = rng.standard_normal((n, eta_dim))
        return cls(int(seed), pick, eps, nu, eta)

    @property
    def n(self) -> int:
        return self.eps.shape[0]

    @property
    def dim(self) -> int:
        return self.eps.shape[1]


def sample(dist, batch: SampleBatch) -> np.ndarray:
    """Clean draws ``x`` from ``dist`` using the batch's picks and ``eps``."""
    mix = as_mixture(dist)
    if batch.dim != mix.dim:
        raise InvalidArgument(f"batch dimension {batch.dim} does not match distribution dimension {mix.dim}")
    if mix.n_components == 1:
        return mix.components[0].mean + mix.components[0].std * batch.eps
    cdf = np.cumsum(mix.weights)
    comp = np.minimum(np.searchsorted(cdf, batch.pick, side="right"), mix.n_components - 1)
    stds = np.stack([c.std for c in mix.components])
    return mix.means[comp] + stds[comp] * batch.eps


@dataclass
class _Draw:
    x: np.ndarray
    x_t: np.ndarray
    sigma: float
    dist: object

    @property
    def target(self) -> np.ndarray:
        return conditional_score(self.x_t, self.x, self.sigma)

    @property
    def marginal(self) -> np.ndarray:
        return marginal_score(self.dist, self.x_t, self.sigma)


def _draw(dist, sigma_t: float, batch: SampleBatch) -> _Draw:
    if not sigma_t > 0:
        raise InvalidArgument(f"sigma_t must be > 0, got {sigma_t}")
    x = sample(dist, batch)
    return _Draw(x, x + sigma_t * batch.nu, float(sigma_t), dist)


def _model_out(model, dr: _Draw, cond) -> np.ndarray:
    if getattr(model, "uses_clean_sample", False):
        return model.eval_with_clean(dr.x_t, dr.x, dr.sigma)
    return model.eval(dr.x_t, dr.sigma, cond if model.cond_dim else None)


def _half_sq(v: np.ndarray) -> np.ndarray:
    return 0.5 * np.sum(v * v, axis=1)


def dsm_loss(model, dist, sigma_t: float, batch: SampleBatch, cond=None) -> MCEstimate:
    """``E[0.5 |s(x_t) - grad log q(x_t | x)|^2]``."""
    dr = _draw(dist, sigma_t, batch)
    return MCEstimate.from_samples(_half_sq(_model_out(model, dr, cond) - dr.target))


def _esm_target(dr: _Draw) -> np.ndarray:
    return dr.marginal + faults.esm_shift()


def esm_loss(model, dist, sigma_t: float, batch: SampleBatch, cond=None) -> MCEstimate:
    """``E[0.5 |s(x_t) - grad log q(x_t)|^2]`` with the exact marginal score."""
    dr = _draw(dist, sigma_t, batch)
    return MCEstimate.from_samples(_half_sq(_model_out(model, dr, cond) - _esm_target(dr)))


def c2_term(dist, sigma_t: float, batch: SampleBatch) -> MCEstimate:
    """``E[0.5 |grad log q(x_t)|^2]``, the term that does not cancel when ``c`` moves."""
    dr = _draw(dist, sigma_t, batch)
    return MCEstimate.from_samples(faults.c2_factor() * _half_sq(dr.marginal))


def c3_term(d: int, sigma_t: float, batch: SampleBatch, dist=None) -> MCEstimate:
    """``E[0.5 |grad log q(x_t | x)|^2]``.

    With ``dist`` the clean samples are drawn and the kernel score evaluated at
    ``(x_t, x)``; without it only the forward noise is used.
    """
    if batch.dim != d:
        raise InvalidArgument(f"batch dimension {batch.dim} does not match d={d}")
    if dist is None:
        if not sigma_t > 0:
            raise InvalidArgument(f"sigma_t must be > 0, got {sigma_t}")
        return MCEstimate.from_samples(_half_sq(-batch.nu / sigma_t))
    return MCEstimate.from_samples(_half_sq(_draw(dist, sigma_t, batch).target))


def cross_term_marginal(model, dist, sigma_t: float, batch: SampleBatch, cond=None) -> MCEstimate:
    """``E[s(x_t)^T grad log q(x_t)]``."""
    dr = _draw(dist, sigma_t, batch)
    return MCEstimate.from_samples(np.sum(_model_out(model, dr, cond) * dr.marginal, axis=1))


def cross_term_conditional(model, dist, sigma_t: float, batch: SampleBatch, cond=None) -> MCEstimate:
    """``E[s(x_t)^T grad log q(x_t | x)]``; equals the marginal form in expectation."""
    dr = _draw(dist, sigma_t, batch)
    return MCEstimate.from_samples(np.sum(_model_out(model, dr, cond) * dr.target, axis=1))


def decomposition_residual(model, dist, sigma_t: float, batch: SampleBatch, cond=None) -> MCEstimate:
    """``L_DSM - L_ESM + C2 - C3`` sample by sample; its expectation is zero."""
    dr = _draw(dist, sigma_t, batch)
    s = _model_out(model, dr, cond)
    target, g = dr.target, dr.marginal
    rows = (
        _half_sq(s - target)
        - _half_sq(s - (g + faults.esm_shift()))
        + faults.c2_factor() * _half_sq(g)
        - _half_sq(target)
    )
    return MCEstimate.from_samples(rows)


def _check_objective(objective: str, allowed=OBJECTIVES) -> str:
    objective = objective.lower()
    if objective not in allowed:
        raise InvalidArgument(f"objective must be one of {allowed}, got {objective!r}")
    return objective


def theta_terms(objective: str, model, dist, sigma_t: float, batch: SampleBatch, cond=None):
    """DSM, ESM, C2 and C3 estimates plus the mean parameter gradient from one forward pass.

    Cheaper than :func:`grad_theta` (no per-sample gradient rows); used by the
    training loops.
    """
    objective = _check_objective(objective, ("dsm", "esm"))
    dr = _draw(dist, sigma_t, batch)
    c = cond if model.cond_dim else None
    target, g = dr.target, _esm_target(dr)
    ref = target if objective == "dsm" else g
    s, dp, _, _ = model.value_and_vjp(dr.x_t, sigma_t, c, lambda out: out - ref)
    terms = {
        "dsm": MCEstimate.from_samples(_half_sq(s - target)),
        "esm": MCEstimate.from_samples(_half_sq(s - g)),
        "c2": MCEstimate.from_samples(faults.c2_factor() * _half_sq(dr.marginal)),
        "c3": MCEstimate.from_samples(_half_sq(target)),
    }
    return terms, dp / batch.n


def grad_theta(objective: str, model, dist, sigma_t: float, batch: SampleBatch, cond=None) -> GradEstimate:
    """Pathwise gradient of the DSM or ESM batch loss with respect to model parameters."""
    objective = _check_objective(objective, ("dsm", "esm"))
    dr = _draw(dist, sigma_t, batch)
    c = cond if model.cond_dim else None
    s = model.eval(dr.x_t, sigma_t, c)
    upstream = s - (dr.target if objective == "dsm" else _esm_target(dr))
    dp, _, _ = model.vjp(dr.x_t, sigma_t, c, upstream, per_sample=True)
    return GradEstimate(dp, dict(model.params.layout))


def _pathwise_rows(objective: str, model, pd: PathwiseDraw, sigma_t: float) -> np.ndarray:
    n, _, k = pd.d_xt.shape
    if objective == "c3":
        target = conditional_score(pd.x_t, pd.x, sigma_t)
        return np.einsum("nd,ndk->nk", target, -(pd.d_xt - pd.d_x) / sigma_t**2)
    if objective == "c2":
        return faults.c2_factor() * np.einsum("nd,ndk->nk", pd.score, pd.d_score)
    c = pd.cond if model.cond_dim else None
    if model.cond_dim and model.cond_dim != pd.cond.shape[1]:
        raise InvalidArgument(f"model condition width {model.cond_dim} != family condition width {pd.cond.shape[1]}")
    s = model.eval(pd.x_t, sigma_t, c)
    if objective == "dsm":
        r = s - conditional_score(pd.x_t, pd.x, sigma_t)
    else:
        r = s - (pd.score + faults.esm_shift())
    _, dx, dc = model.vjp(pd.x_t, sigma_t, c, r, per_sample=True)
    rows = np.einsum("nd,ndk->nk", dx, pd.d_xt)
    if model.cond_dim:
        rows += np.einsum("nm,nmk->nk", dc, pd.d_cond)
    if objective == "esm":
        rows -= np.einsum("nd,ndk->nk", r, pd.d_score)
    return rows


def grad_theta_family(objective: str, model, family, phi, sigma_t: float, batch: SampleBatch) -> GradEstimate:
    """Parameter gradient on draws from a pathwise conditional family (joint training)."""
    objective = _check_objective(objective, ("dsm", "esm"))
    pd = family.draw(phi, float(sigma_t), batch)
    c = pd.cond if model.cond_dim else None
    s = model.eval(pd.x_t, sigma_t, c)
    if objective == "dsm":
        upstream = s - conditional_score(pd.x_t, pd.x, sigma_t)
    else:
        upstream = s - (pd.score + faults.esm_shift())
    dp, _, _ = model.vjp(pd.x_t, sigma_t, c, upstream, per_sample=True)
    return GradEstimate(dp, dict(model.params.layout))


def grad_condition_total(objective: str, model, family, phi, sigma_t: float, batch: SampleBatch) -> GradEstimate:
    """Total derivative of an objective with respect to the family parameters ``phi``.

    The gradient flows through the score model's condition input and through
    the reparameterised samples ``x ~ p(x | c)``; model parameters are held
    fixed.
    """
    objective = _check_objective(objective)
    if not getattr(family, "pathwise", False):
        raise Unsupported(f"{type(family).__name__} has no pathwise sampler")
    pd = family.draw(phi, float(sigma_t), batch)
    return GradEstimate(_pathwise_rows(objective, model, pd, float(sigma_t)))


def grad_distribution(objective: str, frozen_model, p_params, sigma_t: float, batch: SampleBatch) -> GradEstimate:
    """Gradient with respect to ``(m, log u)`` of ``p = N(m, diag(u)^2)`` against a frozen model.

    For ``esm`` the exact noised score of the current ``p`` is the target and
    is differentiated too.
    """
    m, log_u = (np.atleast_1d(np.asarray(v, dtype=float)) for v in p_params)
    family = GaussianFamily(m.size, feed_condition=False)
    return grad_condition_total(objective, frozen_model, family, np.concatenate([m, log_u]), sigma_t, batch)


def grad_mixture_weight(model, family: MixtureWeightFamily, phi, sigma_t: float, batch: SampleBatch) -> GradEstimate:
    """DSM gradient with respect to the weight logit, component choice marginalised.

    Each sample is pushed through both components with the same noise, so the
    row is ``w (1 - w) (l_1 - l_2)``; the model must not depend on ``phi``.
    """
    w = family.weight(phi)
    losses = []
    for comp in family.components:
        x = comp.mean + comp.std * batch.eps
        x_t = x + sigma_t * batch.nu
        s = model.eval(x_t, sigma_t)
        losses.append(_half_sq(s - conditional_score(x_t, x, sigma_t)))
    return GradEstimate((w * (1.0 - w) * (losses[0] - losses[1]))[:, None])


def family_estimates(model, family, phi, sigma_t: float, batch: SampleBatch) -> dict[str, MCEstimate]:
    """DSM, ESM, C2 and C3 values on one pathwise draw (shared random numbers)."""
    pd = family.draw(phi, float(sigma_t), batch)
    s = model.eval(pd.x_t, sigma_t, pd.cond if model.cond_dim else None)
    target = conditional_score(pd.x_t, pd.x, sigma_t)
    return {
        "dsm": MCEstimate.from_samples(_half_sq(s - target)),
        "esm": MCEstimate.from_samples(_half_sq(s - pd.score - faults.esm_shift())),
        "c2": MCEstimate.from_samples(faults.c2_factor() * _half_sq(pd.score)),
        "c3": MCEstimate.from_samples(_half_sq(target)),
    }


def linear_closed_form(a, b, dist: DiagGaussian, sigma_t: float) -> dict[str, float]:
    """Exact DSM, ESM, C2, C3 and residual for ``s = a * x_t + b`` on a Gaussian source."""
    a = np.broadcast_to(np.asarray(a, dtype=float), dist.mean.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), dist.mean.shape)
    mu, s2, sig2 = dist.mean, dist.var, sigma_t**2
    v = s2 + sig2
    bias = a * mu + b
    shift = faults.esm_shift()
    dsm = 0.5 * np.sum(bias**2 + a**2 * s2 + (a * sigma_t + 1.0 / sigma_t) ** 2)
    esm = 0.5 * np.sum((bias - shift) ** 2 + (a + 1.0 / v) ** 2 * v)
    c2 = faults.c2_factor() * np.sum(0.5 / v)
    c3 = 0.5 * mu.size / sig2
    return {
        "dsm": float(dsm),
        "esm": float(esm),
        "c2": float(c2),
        "c3": float(c3),
        "residual": float(dsm - esm + c2 - c3),
    }


def linear_closed_form_grads(a, b, dist: DiagGaussian, sigma_t: float) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Exact ``(dL/da, dL/db)`` of the closed-form DSM and ESM losses."""
    a = np.broadcast_to(np.asarray(a, dtype=float), dist.mean.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), dist.mean.shape)
    mu, s2 = dist.mean, dist.var
    v = s2 + sigma_t**2
    bias = a * mu + b
    shift = faults.esm_shift()
    return {
        "dsm": (bias * mu + a * s2 + (a * sigma_t + 1.0 / sigma_t) * sigma_t, bias.copy()),
        "esm": ((bias - shift) * mu + (a + 1.0 / v) * v, bias - shift),
    }
