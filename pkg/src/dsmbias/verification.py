"""Oracle cross-checks, identity scenarios and negative controls behind ``dsmbias verify``.

Each closed form is compared with something computed independently of it:
plain numpy Monte Carlo, adaptive quadrature from scipy, least-squares
regression or central finite differences.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats

from dsmbias import _pykernels, faults, kernels
from dsmbias import objectives as obj
from dsmbias.analytic import (
    DiagGaussian,
    GaussianMixture,
    NoiseSchedule,
    NoisyEncoderModel,
    c2_closed_form,
    c3_closed_form,
    conditional_score,
    marginal_log_density,
    marginal_score,
    posterior_moments,
    quadrature_expectation,
)
from dsmbias.experiments import Check, ExperimentConfig, _Recorder, run
from dsmbias.families import EncoderFamily, GaussianFamily, MixtureWeightFamily
from dsmbias.models import LinearScoreModel, MlpScoreModel, fd_gradient_check

__all__ = ["oracle_checks", "negative_controls", "verify"]

IDENTITY_SCENARIOS = ("e4", "e5", "e6")


def _rng(seed: int, k: int) -> np.random.Generator:
    return obj.make_rng(seed, 100, k)


def _se_rows(rows: np.ndarray) -> tuple[float, float]:
    return float(rows.mean()), float(rows.std(ddof=1) / math.sqrt(rows.size))


def oracle_checks(seed: int, rec: _Recorder) -> None:
    rng = _rng(seed, 0)

    cases = [
        (DiagGaussian([0.0], [0.0]), 1.0),
        (DiagGaussian.from_std([0.0], [1e-4]), 1.0),
        (DiagGaussian(np.zeros(3), np.zeros(3)), 1.0),
        (DiagGaussian.from_std([1.0, -0.5], [0.6, 1.3]), 0.7),
    ]
    vals, ses, targets = [], [], []
    for dist, sigma in cases:
        v = dist.var + sigma**2
        x_t = dist.mean + np.sqrt(v) * rng.standard_normal((500_000, dist.dim))
        m, se = _se_rows(0.5 * np.sum(((x_t - dist.mean) / v) ** 2, axis=1))
        vals.append(m), ses.append(se), targets.append(c2_closed_form(dist, sigma))
    rec.within_se("oracle: c2_closed_form vs Monte Carlo", vals, ses, targets, f"{len(cases)} cases")

    devs = []
    for mean, std, sigma in [(0.0, 1.0, 1.0), (2.0, 0.3, 0.5), (-1.0, 2.0, 0.1)]:
        dist = DiagGaussian.from_std([mean], [std])
        q = quadrature_expectation(
            lambda xs, d=dist, s=sigma: 0.5 * marginal_score(d, xs[:, None], s)[:, 0] ** 2, dist.noised(sigma), 64
        )
        devs.append(q - c2_closed_form(dist, sigma))
    rec.flag("oracle: c2_closed_form vs quadrature", max(map(abs, devs)) <= 1e-8, max(map(abs, devs)), 1e-8)

    vals, ses, targets = [], [], []
    for d, sigma in [(1, 1.0), (2, 1.0), (1, 2.0), (3, 0.4)]:
        x = rng.normal(1.0, 2.0, (200_000, d))
        x_t = x + sigma * rng.standard_normal(x.shape)
        m, se = _se_rows(0.5 * np.sum(conditional_score(x_t, x, sigma) ** 2, axis=1))
        vals.append(m), ses.append(se), targets.append(c3_closed_form(d, sigma))
    rec.within_se("oracle: c3_closed_form vs Monte Carlo", vals, ses, targets, "4 cases")

    vals, ses, targets = [], [], []
    for alpha, beta, mu0, s0 in [(1.0, 1.0, 0.0, 1.0), (1.7, 0.6, 0.4, 1.3), (-0.8, 2.0, -1.0, 0.5)]:
        model = NoisyEncoderModel(alpha, beta, DiagGaussian.from_std([mu0], [s0]))
        n = 200_000
        x = mu0 + s0 * rng.standard_normal(n)
        c = alpha * x + beta * rng.standard_normal(n)
        fit = stats.linregress(c, x)
        resid = x - (fit.slope * c + fit.intercept)
        m0, var = posterior_moments(model, 0.0)
        m1, _ = posterior_moments(model, 1.0)
        rvar = resid.var(ddof=2)
        vals += [fit.slope, fit.intercept, rvar]
        ses += [fit.stderr, fit.intercept_stderr, rvar * math.sqrt(2.0 / (n - 2))]
        targets += [m1 - m0, m0, var]
    rec.within_se("oracle: posterior_moments vs regression", vals, ses, targets, "slope, intercept, residual variance")

    vals, ses, targets = [], [], []
    for i in range(5):
        d = int(rng.integers(1, 4))
        dist = DiagGaussian(rng.normal(0.0, 2.0, d), rng.uniform(-1.0, 0.5, d))
        sigma = float(rng.uniform(0.3, 2.0))
        a, b = rng.normal(size=d), rng.normal(size=d)
        model = LinearScoreModel.from_arrays(NoiseSchedule([sigma]), [a], [b])
        cf = obj.linear_closed_form(a, b, dist, sigma)
        batch = obj.SampleBatch.generate(int(rng.integers(2**63 - 1)), 200_000, d)
        for name, fn in (("dsm", obj.dsm_loss), ("esm", obj.esm_loss)):
            est = fn(model, dist, sigma, batch)
            vals.append(est.value), ses.append(est.std_error), targets.append(cf[name])
    rec.within_se("oracle: linear-model losses vs Monte Carlo", vals, ses, targets, "5 cases x DSM, ESM")

    mix = GaussianMixture(
        [0.2, 0.5, 0.3],
        [DiagGaussian.from_std([-1.5], [0.4]), DiagGaussian.from_std([0.3], [0.9]), DiagGaussian.from_std([2.2], [0.6])],
    )
    devs = []
    for x_t in (-3.1, -0.4, 1.7, 4.0):
        for sigma in (0.3, 1.0):
            dens, _ = integrate.quad(
                lambda x: sum(
                    w * stats.norm.pdf(x, c.mean[0], c.std[0]) for w, c in zip(mix.weights, mix.components)
                )
                * stats.norm.pdf(x_t, x, sigma),
                -np.inf,
                np.inf,
                epsabs=1e-14,
                epsrel=1e-12,
                limit=200,
            )
            devs.append(marginal_log_density(mix, [x_t], sigma) - math.log(dens))
    rec.flag("oracle: marginal_log_density vs adaptive quadrature", max(map(abs, devs)) <= 1e-8, max(map(abs, devs)), 1e-8)

    h, devs = 1e-5, []
    for _ in range(50):
        x, sigma = rng.normal(0.0, 2.5, 1), float(rng.uniform(0.2, 2.0))
        fd = (marginal_log_density(mix, x + h, sigma) - marginal_log_density(mix, x - h, sigma)) / (2 * h)
        devs.append(marginal_score(mix, x, sigma)[0] - fd)
    rec.flag("oracle: marginal_score vs finite differences", max(map(abs, devs)) <= 1e-6, max(map(abs, devs)), 1e-6)

    vals, ses, targets = [], [], []
    fams = [
        (GaussianFamily(1), np.array([0.3, -0.4])),
        (EncoderFamily(DiagGaussian([0.0], [0.0])), np.array([1.4])),
    ]
    for fam, phi in fams:
        batch = obj.SampleBatch.generate(int(rng.integers(2**63 - 1)), 200_000, 1)
        m, se = _se_rows(0.5 * np.sum(fam.draw(phi, 0.8, batch).score ** 2, axis=1))
        vals.append(m), ses.append(se), targets.append(fam.c2_exact(phi, 0.8))
    mw = MixtureWeightFamily((-1.0, 1.0), 0.5)
    batch = obj.SampleBatch.generate(int(rng.integers(2**63 - 1)), 200_000, 1)
    est = obj.c2_term(mw.dist([0.7]), 0.5, batch)
    vals.append(est.value), ses.append(est.std_error), targets.append(faults.c2_factor() * mw.c2_exact([0.7], 0.5))
    rec.within_se("oracle: family C2 vs Monte Carlo", vals, ses, targets, "gaussian, encoder, mixture-weight")

    x = rng.normal(0.0, 3.0, (200, 2))
    u = rng.normal(size=(200, 2))
    args = (x, rng.normal(size=(4, 2)), rng.uniform(0.1, 2.0, (4, 2)), np.log(rng.dirichlet(np.ones(4))))
    a = kernels.mixture_logpdf_score(*args)
    b = _pykernels.mixture_logpdf_score(*args)
    hvp = kernels.mixture_score_hvp(*args, u) - _pykernels.mixture_score_hvp(*args, u)
    dev = max(np.max(np.abs(a[0] - b[0])), np.max(np.abs(a[1] - b[1])), np.max(np.abs(hvp)))
    rec.flag("oracle: kernel backends agree", dev <= 1e-10, dev, 1e-10, f"active backend {kernels.BACKEND}")

    worst = 0.0
    sched = NoiseSchedule([0.5, 1.0])
    for model in (
        LinearScoreModel(sched, 2, rng.normal(size=12), conditional=True),
        MlpScoreModel(2, [5, 4], cond_dim=3, rng=rng),
    ):
        point = (rng.normal(size=(6, 2)), 0.5, rng.normal(size=(6, model.cond_dim)), rng.normal(size=(6, 2)))
        worst = max(worst, fd_gradient_check(model, point, 1e-5).max_rel_error)
    rec.flag("oracle: model gradients vs finite differences", worst <= 1e-5, worst, 1e-5, "linear and MLP")


def negative_controls(seed: int, rec: _Recorder) -> None:
    """Each control passes when the deliberately broken run is caught."""
    e4 = run(ExperimentConfig.default("e4", seed), inject=("c2-scale",))
    rec.flag("control: E4 fails under c2-scale", not e4.passed, float(e4.passed), 0.0,
             f"first failure: {e4.first_failure().name if e4.first_failure() else 'none'}")
    e1 = run(ExperimentConfig.default("e1", seed, train_steps=0), inject=("esm-target",))
    rec.flag("control: E1 fails under esm-target", not e1.passed, float(e1.passed), 0.0,
             f"first failure: {e1.first_failure().name if e1.first_failure() else 'none'}")

    rng = _rng(seed, 1)
    model = MlpScoreModel(1, [4], rng=rng)
    point = (rng.normal(size=(5, 1)), 1.0, None, rng.normal(size=(5, 1)))

    def corrupted(*args, **kw):
        dp, dx, dc = model.vjp(*args, **kw)
        return dp * 1.01, dx, dc

    caught = not fd_gradient_check(model, point, 1e-5, grad_fn=corrupted).passed
    rec.flag("control: corrupted gradient caught by finite differences", caught, float(not caught), 0.0)


def verify(seed: int = 0, inject=(), configs: dict | None = None) -> tuple[list[Check], dict]:
    """Run the full verification suite; returns the checks and per-scenario verdicts."""
    configs = configs or {}
    rec = _Recorder(ExperimentConfig.default("e4", seed), None)
    verdicts = {}
    with faults.inject(*inject):
        oracle_checks(seed, rec)
        for sc in IDENTITY_SCENARIOS:
            cfg = configs.get(sc) or ExperimentConfig.default(sc, seed)
            report = run(cfg)
            verdicts[sc] = report.verdict
            for c in report.checks:
                rec.checks.append(Check(f"{sc}: {c.name}", c.passed, c.value, c.bound, c.detail))
        negative_controls(seed, rec)
    return rec.checks, verdicts
