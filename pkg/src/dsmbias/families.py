"""Conditional source families ``p(x | c)`` whose parameters ``phi`` get optimised.

A pathwise family turns a :class:`~dsmbias.objectives.SampleBatch` into a
:class:`PathwiseDraw`: the noisy samples, the condition vector handed to the
score model, the exact score of ``q(x_t | c)`` at those samples, and the total
derivatives of all three with respect to ``phi``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsmbias.analytic import (
    DiagGaussian,
    GaussianMixture,
    NoiseSchedule,
    NoisyEncoderModel,
    marginal_score,
    quadrature_expectation,
)
from dsmbias.errors import InvalidArgument
from dsmbias.models import ExactScoreModel, LinearScoreModel

__all__ = ["PathwiseDraw", "GaussianFamily", "EncoderFamily", "MixtureWeightFamily"]


@dataclass(frozen=True)
class PathwiseDraw:
    x: np.ndarray  # (n, d) clean samples
    x_t: np.ndarray  # (n, d)
    nu: np.ndarray  # (n, d) forward-process noise
    cond: np.ndarray  # (n, m) condition fed to the score model
    score: np.ndarray  # (n, d) grad_{x_t} log q(x_t | c)
    d_xt: np.ndarray  # (n, d, k)
    d_cond: np.ndarray  # (n, m, k)
    d_score: np.ndarray  # (n, d, k) total derivative, including the x_t path
    d_x: np.ndarray  # (n, d, k)


def _phi(phi, k: int) -> np.ndarray:
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if phi.size != k:
        raise InvalidArgument(f"expected {k} family parameters, got {phi.size}")
    return phi


class GaussianFamily:
    """``p(x | c) = N(c_mean, diag(exp(c_log_std))^2)`` with ``phi = [c_mean, c_log_std]``.

    With ``feed_condition`` the score model also receives ``phi`` as its
    condition input; otherwise the model is unconditional (distribution
    optimisation against a frozen model).
    """

    pathwise = True

    def __init__(self, dim: int = 1, feed_condition: bool = True):
        self.dim = int(dim)
        self.n_params = 2 * self.dim
        self.cond_dim = self.n_params if feed_condition else 0

    def dist(self, phi) -> DiagGaussian:
        phi = _phi(phi, self.n_params)
        return DiagGaussian(phi[: self.dim], phi[self.dim :])

    def draw(self, phi, sigma_t: float, batch) -> PathwiseDraw:
        phi = _phi(phi, self.n_params)
        d, k = self.dim, self.n_params
        mean, s = phi[:d], np.exp(phi[d:])
        eps, nu = batch.eps, batch.nu
        n = eps.shape[0]
        x = mean + s * eps
        x_t = x + sigma_t * nu
        vt = s**2 + sigma_t**2
        dev = s * eps + sigma_t * nu
        score = -dev / vt

        idx = np.arange(d)
        d_xt = np.zeros((n, d, k))
        d_xt[:, idx, idx] = 1.0
        d_xt[:, idx, d + idx] = s * eps
        d_score = np.zeros((n, d, k))
        d_score[:, idx, d + idx] = -s * eps / vt + dev * 2.0 * s**2 / vt**2
        if self.cond_dim:
            cond = np.broadcast_to(phi, (n, k))
            d_cond = np.broadcast_to(np.eye(k), (n, k, k))
        else:
            cond = np.zeros((n, 0))
            d_cond = np.zeros((n, 0, k))
        return PathwiseDraw(x, x_t, nu, cond, score, d_xt, d_cond, d_score, d_xt.copy())

    def oracle_model(self, phi, schedule: NoiseSchedule) -> LinearScoreModel:
        return LinearScoreModel.optimal(self.dist(phi), schedule)

    def c2_exact(self, phi, sigma_t: float) -> float:
        return float(np.sum(0.5 / (self.dist(phi).var + sigma_t**2)))

    def describe(self, phi) -> dict:
        phi = _phi(phi, self.n_params)
        return {"mean": phi[: self.dim].tolist(), "std": np.exp(phi[self.dim :]).tolist()}


class EncoderFamily:
    """Noisy linear encoder ``c = alpha * x + beta * eta``; ``phi = [alpha]``, ``beta`` fixed.

    The sampled condition ``c`` is what the score model sees, so gradients with
    respect to ``alpha`` flow through the model input and through the exact
    posterior ``p(x | c)``.
    """

    pathwise = True
    n_params = 1

    def __init__(self, prior: DiagGaussian, beta: float = 1.0):
        self.prior = prior
        self.beta = float(beta)
        self.dim = prior.dim
        self.cond_dim = prior.dim
        NoisyEncoderModel(0.0, self.beta, prior)

    def encoder(self, phi) -> NoisyEncoderModel:
        return NoisyEncoderModel(float(_phi(phi, 1)[0]), self.beta, self.prior)

    def draw(self, phi, sigma_t: float, batch) -> PathwiseDraw:
        alpha = float(_phi(phi, 1)[0])
        beta = self.beta
        mu0, s0sq = self.prior.mean, self.prior.var
        x = mu0 + np.sqrt(s0sq) * batch.eps
        nu = batch.nu
        x_t = x + sigma_t * nu
        eta = batch.eta[:, : self.dim]
        c = alpha * x + beta * eta

        den = alpha**2 * s0sq + beta**2
        k = alpha * s0sq / den
        var = s0sq * beta**2 / den
        m = mu0 + k * (c - alpha * mu0)
        vt = var + sigma_t**2
        score = -(x_t - m) / vt

        dk = s0sq * (beta**2 - alpha**2 * s0sq) / den**2
        dvar = -2.0 * alpha * s0sq**2 * beta**2 / den**2
        dm = dk * (c - alpha * mu0) - k * mu0 + k * x
        d_score = dm / vt + (x_t - m) * dvar / vt**2
        n = x.shape[0]
        return PathwiseDraw(
            x,
            x_t,
            nu,
            c,
            score,
            np.zeros((n, self.dim, 1)),
            x[:, :, None],
            d_score[:, :, None],
            np.zeros((n, self.dim, 1)),
        )

    def oracle_model(self, phi, schedule: NoiseSchedule) -> LinearScoreModel:
        enc = self.encoder(phi)
        var, k = enc.posterior_variance(), enc.posterior_gain()
        mu0 = self.prior.mean
        a, b, w = [], [], []
        for s in schedule:
            vt = var + s**2
            a.append(-1.0 / vt)
            b.append(mu0 * (1.0 - k * enc.alpha) / vt)
            w.append(k / vt)
        return LinearScoreModel.from_arrays(schedule, a, b, w)

    def c2_exact(self, phi, sigma_t: float) -> float:
        return float(np.sum(0.5 / (self.encoder(phi).posterior_variance() + sigma_t**2)))

    def describe(self, phi) -> dict:
        enc = self.encoder(phi)
        return {"alpha": enc.alpha, "posterior_var": enc.posterior_variance().tolist()}


class MixtureWeightFamily:
    """Two fixed components whose weight is ``sigmoid(phi[0])`` on the first one.

    Component choice is discrete, so there is no pathwise sampler; the DSM
    gradient uses :func:`dsmbias.objectives.grad_mixture_weight` instead.
    """

    pathwise = False
    n_params = 1
    cond_dim = 0
    dim = 1

    def __init__(self, locs=(-1.0, 1.0), std: float = 0.5):
        self.components = [DiagGaussian.from_std([float(m)], [std]) for m in locs]

    @staticmethod
    def weight(phi) -> float:
        return float(1.0 / (1.0 + np.exp(-float(_phi(phi, 1)[0]))))

    def dist(self, phi) -> GaussianMixture:
        w = self.weight(phi)
        return GaussianMixture([w, 1.0 - w], self.components)

    def oracle_model(self, phi, schedule: NoiseSchedule) -> ExactScoreModel:
        return ExactScoreModel(self.dist(phi))

    def c2_exact(self, phi, sigma_t: float, nodes: int = 128) -> float:
        dist = self.dist(phi)
        return quadrature_expectation(
            lambda xs: 0.5 * marginal_score(dist, xs[:, None], sigma_t)[:, 0] ** 2,
            dist.noised(sigma_t),
            nodes,
        )

    def describe(self, phi) -> dict:
        return {"weight": self.weight(phi)}
