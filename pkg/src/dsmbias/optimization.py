"""First-order training loops for the three regimes.

``fit_theta``
    score-network parameters only (the classical setting).
``optimize_condition``
    the conditional family's parameters, either jointly with the network or
    with the network held at its exact optimum for the current condition.
``optimize_distribution``
    the parameters of a Gaussian source against a frozen network.

Every step draws one noise level uniformly from the schedule and a fresh
:class:`~dsmbias.objectives.SampleBatch`; runs are deterministic given the
config seed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dsmbias import faults
from dsmbias import objectives as obj
from dsmbias.analytic import DiagGaussian, NoiseSchedule, as_mixture, marginal_score
from dsmbias.errors import DivergenceError, InvalidArgument
from dsmbias.families import GaussianFamily
from dsmbias.models import LinearScoreModel

__all__ = [
    "OptimizerConfig",
    "Optimizer",
    "TrainTrace",
    "fit_theta",
    "optimize_condition",
    "optimize_distribution",
    "score_norm_metric",
]

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    step_size: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    steps: int = 2000
    batch_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise InvalidArgument(f"method must be 'adam' or 'sgd', got {self.method!r}")
        if not self.step_size > 0:
            raise InvalidArgument("step_size must be > 0")
        if not all(0 < b < 1 for b in self.betas):
            raise InvalidArgument("moment decay rates must lie in (0, 1)")
        if not self.epsilon > 0:
            raise InvalidArgument("epsilon must be > 0")
        if self.steps < 0:
            raise InvalidArgument("steps must be >= 0")
        if self.batch_size < 2:
            raise InvalidArgument("batch_size must be >= 2")


class Optimizer:
    """Plain gradient descent or Adam on a flat parameter vector."""

    def __init__(self, config: OptimizerConfig, size: int):
        self.config = config
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.method == "sgd":
            return params - cfg.step_size * grad
        b1, b2 = cfg.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return params - cfg.step_size * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


BASE_COLUMNS = (
    "step",
    "sigma",
    "dsm",
    "dsm_se",
    "esm",
    "esm_se",
    "c2",
    "c2_se",
    "c3",
    "metric",
    "metric_se",
    "param_norm",
    "grad_norm",
)


@dataclass
class TrainTrace:
    """One record per step.

    CSV column order is ``BASE_COLUMNS`` followed by the regime's parameter
    columns (``param_names``) in the order given.
    """

    param_names: list[str] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        if self.records and row["step"] <= self.records[-1]["step"]:
            raise InvalidArgument("trace steps must be increasing")
        self.records.append(row)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def columns(self) -> list[str]:
        return list(BASE_COLUMNS) + list(self.param_names)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for r in self.records:
                writer.writerow([_fmt(r.get(c, math.nan)) for c in self.columns])

    @classmethod
    def from_csv(cls, path) -> "TrainTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
                raise InvalidArgument(f"{path} is not a trace CSV")
            trace = cls(header[len(BASE_COLUMNS) :])
            for row in reader:
                rec = {k: float(v) for k, v in zip(header, row)}
                rec["step"] = int(rec["step"])
                trace.records.append(rec)
        return trace

    def window_mean(self, name: str, first: bool, width: int = 50) -> tuple[float, float]:
        """Mean of a column over the first or last ``width`` steps and its propagated SE."""
        vals = self.column(name)
        ses = self.column(name + "_se")
        sl = slice(0, width) if first else slice(-width, None)
        v, s = vals[sl], ses[sl]
        return float(v.mean()), float(np.sqrt(np.sum(s**2)) / len(s))

    def summary(self) -> dict:
        if not self.records:
            return {"steps": 0}
        first, last = self.records[0], self.records[-1]
        return {
            "steps": len(self.records),
            "first": {k: first.get(k) for k in self.columns},
            "last": {k: last.get(k) for k in self.columns},
        }


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class _Stepper:
    """Per-step noise level and batch, drawn from two independent substreams of the seed."""

    def __init__(self, config: OptimizerConfig, schedule: NoiseSchedule, dim: int, eta_dim: int | None = None):
        self.rng = obj.make_rng(config.seed, 0)
        self.seeds = obj.make_rng(config.seed, 1)
        self.schedule = schedule
        self.config = config
        self.dim = dim
        self.eta_dim = eta_dim

    def next(self) -> tuple[float, obj.SampleBatch]:
        sigma = self.schedule.sigmas[int(self.rng.integers(len(self.schedule)))]
        seed = int(self.seeds.integers(2**63 - 1))
        return sigma, obj.SampleBatch.generate(seed, self.config.batch_size, self.dim, self.eta_dim)


def _guard(step: int, **losses: float) -> None:
    for name, value in losses.items():
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            raise DivergenceError(f"{name} loss {value!r} crossed {DIVERGENCE_LIMIT:g} at step {step}", step, value)


def score_norm_metric(target, schedule: NoiseSchedule, batch: obj.SampleBatch) -> obj.MCEstimate:
    """C2 averaged over the schedule; larger means more concentrated noisy marginals.

    ``target`` is a distribution, or a ``(family, phi)`` pair for conditional
    families (C2 then averages over the conditions too).
    """
    rows = np.zeros(batch.n)
    for sigma in schedule:
        if isinstance(target, tuple):
            family, phi = target
            if getattr(family, "pathwise", False):
                g = family.draw(phi, sigma, batch).score
            else:
                dist = family.dist(phi)
                g = marginal_score(dist, obj.sample(dist, batch) + sigma * batch.nu, sigma)
        else:
            g = marginal_score(target, obj.sample(target, batch) + sigma * batch.nu, sigma)
        rows += 0.5 * np.sum(g * g, axis=1)
    return obj.MCEstimate.from_samples(faults.c2_factor() * rows / len(schedule))


def _closed_form_linear_grad(objective: str, model: LinearScoreModel, dist: DiagGaussian, sigma: float) -> np.ndarray:
    i = model.schedule.index(sigma)
    L, d = len(model.schedule), model.dim
    a = model.params["a"].reshape(L, d)[i]
    b = model.params["b"].reshape(L, d)[i]
    da, db = obj.linear_closed_form_grads(a, b, dist, sigma)[objective]
    grad = np.zeros(model.n_params)
    grad[i * d : (i + 1) * d] = da
    grad[L * d + i * d : L * d + (i + 1) * d] = db
    return grad


def fit_theta(
    objective: str,
    model,
    dist,
    schedule: NoiseSchedule,
    config: OptimizerConfig,
    gradient: str = "mc",
):
    """Train the score network on ``dist`` with the DSM or ESM objective.

    Both losses are recorded every step whichever one drives the updates.
    ``gradient="closed-form"`` uses exact gradients (linear model on a
    Gaussian source only) and records exact losses.
    """
    objective = objective.lower()
    if objective not in ("dsm", "esm"):
        raise InvalidArgument(f"objective must be 'dsm' or 'esm', got {objective!r}")
    closed = gradient == "closed-form"
    if closed and not (isinstance(model, LinearScoreModel) and isinstance(dist, DiagGaussian)):
        raise InvalidArgument("closed-form gradients need a LinearScoreModel and a DiagGaussian source")
    dim = as_mixture(dist).dim
    stepper = _Stepper(config, schedule, dim)
    opt = Optimizer(config, model.n_params)
    trace = TrainTrace([])
    for step in range(config.steps):
        sigma, batch = stepper.next()
        if closed:
            i = model.schedule.index(sigma)
            L, d = len(model.schedule), model.dim
            terms = obj.linear_closed_form(
                model.params["a"].reshape(L, d)[i], model.params["b"].reshape(L, d)[i], dist, sigma
            )
            est = {k: obj.MCEstimate(terms[k], 0.0, 0) for k in ("dsm", "esm", "c2", "c3")}
            grad = _closed_form_linear_grad(objective, model, dist, sigma)
            metric = obj.MCEstimate(
                float(np.mean([obj.linear_closed_form(0, 0, dist, s)["c2"] for s in schedule])), 0.0, 0
            )
        else:
            est, grad = obj.theta_terms(objective, model, dist, sigma, batch)
            metric = score_norm_metric(dist, schedule, batch)
        _guard(step, dsm=est["dsm"].value, esm=est["esm"].value)
        trace.append(**_row(step, sigma, est, metric, model.params.norm(), grad))
        model = model.with_params(opt.step(model.params.values, grad))
    return model, trace


def _row(step, sigma, est, metric, param_norm, grad, **extra) -> dict:
    return {
        "step": step,
        "sigma": sigma,
        "dsm": est["dsm"].value,
        "dsm_se": est["dsm"].std_error,
        "esm": est["esm"].value,
        "esm_se": est["esm"].std_error,
        "c2": est["c2"].value,
        "c2_se": est["c2"].std_error,
        "c3": est["c3"].value,
        "metric": metric.value,
        "metric_se": metric.std_error,
        "param_norm": param_norm,
        "grad_norm": float(np.linalg.norm(grad)),
        **extra,
    }


def _family_terms(model, family, phi, sigma, batch):
    if getattr(family, "pathwise", False):
        return obj.family_estimates(model, family, phi, sigma, batch)
    dist = family.dist(phi)
    return {
        "dsm": obj.dsm_loss(model, dist, sigma, batch),
        "esm": obj.esm_loss(model, dist, sigma, batch),
        "c2": obj.c2_term(dist, sigma, batch),
        "c3": obj.c3_term(dist.dim, sigma, batch),
    }


def optimize_condition(
    model,
    family,
    phi0,
    schedule: NoiseSchedule,
    config: OptimizerConfig,
    regime: str = "theta-oracle",
    objective: str = "dsm",
):
    """Optimise the family parameters ``phi`` with the given objective.

    ``regime="theta-oracle"`` replaces the network by the family's exact
    optimum for the current ``phi`` before every condition step (so only the
    bias term can move ``phi``); ``regime="joint"`` alternates one network step
    and one condition step. Returns ``(model, phi, trace)``.
    """
    objective = objective.lower()
    if regime not in ("joint", "theta-oracle"):
        raise InvalidArgument(f"regime must be 'joint' or 'theta-oracle', got {regime!r}")
    if objective not in ("dsm", "esm"):
        raise InvalidArgument(f"objective must be 'dsm' or 'esm', got {objective!r}")
    pathwise = getattr(family, "pathwise", False)
    if not pathwise and (regime != "theta-oracle" or objective != "dsm"):
        raise InvalidArgument("non-pathwise families support only DSM in the theta-oracle regime")
    phi = np.asarray(phi0, dtype=float).reshape(-1).copy()
    stepper = _Stepper(config, schedule, family.dim, getattr(family, "cond_dim", None) or None)
    opt_phi = Optimizer(config, phi.size)
    opt_theta = Optimizer(config, model.n_params) if regime == "joint" else None
    trace = TrainTrace([f"phi{i}" for i in range(phi.size)])
    for step in range(config.steps):
        sigma, batch = stepper.next()
        if regime == "theta-oracle":
            model = family.oracle_model(phi, schedule)
        est = _family_terms(model, family, phi, sigma, batch)
        _guard(step, dsm=est["dsm"].value, esm=est["esm"].value)
        metric = score_norm_metric((family, phi), schedule, batch)
        if pathwise:
            grad = obj.grad_condition_total(objective, model, family, phi, sigma, batch).value
        else:
            grad = obj.grad_mixture_weight(model, family, phi, sigma, batch).value
        trace.append(
            **_row(step, sigma, est, metric, model.params.norm(), grad, **{f"phi{i}": v for i, v in enumerate(phi)})
        )
        if opt_theta is not None:
            g_theta = obj.grad_theta_family(objective, model, family, phi, sigma, batch).value
            model = model.with_params(opt_theta.step(model.params.values, g_theta))
        phi = opt_phi.step(phi, grad)
    if regime == "theta-oracle" and config.steps:
        model = family.oracle_model(phi, schedule)
    return model, phi, trace


def optimize_distribution(
    frozen_model,
    p_init: DiagGaussian,
    schedule: NoiseSchedule,
    config: OptimizerConfig,
    objective: str = "dsm",
):
    """Fit ``p = N(m, diag(u)^2)`` against a frozen score network; returns ``(p_final, trace)``.

    The trace's ``metric`` column is the schedule-averaged C2 of the current
    ``p``; the parameter columns are ``m0.., log_u0..``.
    """
    objective = objective.lower()
    if objective not in ("dsm", "esm"):
        raise InvalidArgument(f"objective must be 'dsm' or 'esm', got {objective!r}")
    d = p_init.dim
    family = GaussianFamily(d, feed_condition=False)
    phi = np.concatenate([p_init.mean, p_init.log_std])
    stepper = _Stepper(config, schedule, d)
    opt = Optimizer(config, phi.size)
    names = [f"m{i}" for i in range(d)] + [f"log_u{i}" for i in range(d)]
    trace = TrainTrace(names)
    for step in range(config.steps):
        sigma, batch = stepper.next()
        est = obj.family_estimates(frozen_model, family, phi, sigma, batch)
        _guard(step, dsm=est["dsm"].value, esm=est["esm"].value)
        metric = score_norm_metric((family, phi), schedule, batch)
        grad = obj.grad_condition_total(objective, frozen_model, family, phi, sigma, batch).value
        trace.append(**_row(step, sigma, est, metric, float(np.linalg.norm(phi)), grad, **dict(zip(names, phi))))
        phi = opt.step(phi, grad)
    return family.dist(phi), trace


def write_summary(path, trace: TrainTrace, **final) -> None:
    Path(path).write_text(json.dumps({"final": final, **trace.summary()}, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")
