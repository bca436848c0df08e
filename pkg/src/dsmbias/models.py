"""Parametric score approximators ``s(x_t, sigma_t, c)`` with hand-written gradients.

All models work on batches: ``x_t`` has shape ``(n, d)`` and the condition ``c``
has shape ``(n, m)`` (a single ``(d,)`` point is accepted and returned as such).
Gradients are vector-Jacobian products against an ``upstream`` array of the
output's shape.

Parameter order is canonical: for :class:`MlpScoreModel` the segments are
``W0, b0, W1, b1, ...`` (weights row-major as ``(out, in)``), for
:class:`LinearScoreModel` they are ``a, b`` and, when the model is
conditional, ``w``, each laid out level-major as ``(levels, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dsmbias.analytic import (
    DiagGaussian,
    NoiseSchedule,
    as_mixture,
    conditional_score,
    marginal_score,
    marginal_score_hvp,
)
from dsmbias.errors import InvalidArgument

__all__ = [
    "ParamVector",
    "LinearScoreModel",
    "MlpScoreModel",
    "ExactScoreModel",
    "ConditionalScoreOracle",
    "optimal_linear_params",
    "fd_gradient_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: dict[str, tuple[int, int]]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        spans = sorted(self.layout.values())
        pos = 0
        for start, stop in spans:
            if start != pos or stop < start:
                raise InvalidArgument(f"layout segments must partition the vector, got {self.layout}")
            pos = stop
        if pos != values.size:
            raise InvalidArgument(f"layout covers {pos} entries but vector has {values.size}")

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop = self.layout[name]
        return self.values[start:stop]

    def names(self) -> list[str]:
        return sorted(self.layout, key=lambda k: self.layout[k][0])

    def replace(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=float).copy(), dict(self.layout))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self.replace(self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self.replace(self.values - other.values)

    def __mul__(self, k: float) -> "ParamVector":
        return self.replace(self.values * k)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def layout_string(self) -> str:
        return ",".join(f"{k}:{a}:{b}" for k, (a, b) in sorted(self.layout.items(), key=lambda kv: kv[1][0]))

    @staticmethod
    def parse_layout(text: str) -> dict[str, tuple[int, int]]:
        out = {}
        for item in filter(None, text.split(",")):
            name, a, b = item.split(":")
            out[name] = (int(a), int(b))
        return out


def _batch(x_t, d: int) -> tuple[np.ndarray, bool]:
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    xb = np.atleast_2d(x_t)
    if xb.ndim != 2 or xb.shape[1] != d:
        raise InvalidArgument(f"x_t has shape {x_t.shape}, model expects dimension {d}")
    return xb, single


def _cond_batch(c, n: int, m: int) -> np.ndarray:
    if m == 0:
        return np.zeros((n, 0))
    if c is None:
        raise InvalidArgument(f"model expects a condition of dimension {m}")
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = np.broadcast_to(c, (n, c.size))
    if c.shape != (n, m):
        raise InvalidArgument(f"condition has shape {c.shape}, expected ({n}, {m})")
    return c


class ScoreModel:
    """Shared plumbing; subclasses implement ``_forward`` and ``_vjp``."""

    dim: int
    cond_dim: int
    params: ParamVector

    @property
    def n_params(self) -> int:
        return len(self.params)

    def eval(self, x_t, sigma_t: float, c=None) -> np.ndarray:
        xb, single = _batch(x_t, self.dim)
        out = self._forward(xb, float(sigma_t), _cond_batch(c, xb.shape[0], self.cond_dim))
        return out[0] if single else out

    def vjp(self, x_t, sigma_t: float, c, upstream, per_sample: bool = False):
        """Return ``(d_params, d_x_t, d_c)`` of ``<upstream, eval(...)>``.

        ``d_params`` is ``(n, P)`` when ``per_sample`` else the batch sum ``(P,)``.
        """
        xb, _ = _batch(x_t, self.dim)
        ub = np.atleast_2d(np.asarray(upstream, dtype=float))
        if ub.shape != xb.shape:
            raise InvalidArgument(f"upstream has shape {ub.shape}, expected {xb.shape}")
        cb = _cond_batch(c, xb.shape[0], self.cond_dim)
        return self._vjp(xb, float(sigma_t), cb, ub, per_sample)

    def value_and_vjp(self, x_t, sigma_t: float, c, upstream_fn, per_sample: bool = False):
        """``eval`` then ``vjp`` against ``upstream_fn(output)``; returns ``(output, d_params, d_x_t, d_c)``."""
        out = self.eval(x_t, sigma_t, c)
        return (out, *self.vjp(x_t, sigma_t, c, upstream_fn(out), per_sample))

    def grad_params(self, x_t, sigma_t: float, c, upstream) -> ParamVector:
        dp, _, _ = self.vjp(x_t, sigma_t, c, upstream)
        return self.params.replace(dp)

    def grad_condition(self, x_t, sigma_t: float, c, upstream) -> np.ndarray:
        _, _, dc = self.vjp(x_t, sigma_t, c, upstream)
        return dc[0] if np.ndim(upstream) == 1 else dc

    def grad_input(self, x_t, sigma_t: float, c, upstream) -> np.ndarray:
        _, dx, _ = self.vjp(x_t, sigma_t, c, upstream)
        return dx[0] if np.ndim(upstream) == 1 else dx

    def with_params(self, values) -> "ScoreModel":
        raise NotImplementedError


class LinearScoreModel(ScoreModel):
    """Per-level affine score ``a_t * x_t + b_t (+ w_t * c)``, elementwise.

    A conditional model (``conditional=True``) takes a condition of the same
    dimension as ``x_t``.
    """

    def __init__(self, schedule: NoiseSchedule, dim: int, params=None, conditional: bool = False):
        self.schedule = schedule
        self.dim = int(dim)
        self.cond_dim = self.dim if conditional else 0
        L, d = len(schedule), self.dim
        layout = {"a": (0, L * d), "b": (L * d, 2 * L * d)}
        if conditional:
            layout["w"] = (2 * L * d, 3 * L * d)
        size = (3 if conditional else 2) * L * d
        values = np.zeros(size) if params is None else np.asarray(
            params.values if isinstance(params, ParamVector) else params, dtype=float
        )
        if values.shape != (size,):
            raise InvalidArgument(f"linear model needs {size} parameters, got {values.shape}")
        self.params = ParamVector(values.copy(), layout)

    @classmethod
    def from_arrays(cls, schedule: NoiseSchedule, a, b, w=None) -> "LinearScoreModel":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.broadcast_to(np.atleast_2d(np.asarray(b, dtype=float)), a.shape)
        L = len(schedule)
        if a.shape[0] == 1 and L > 1:
            a = np.repeat(a, L, axis=0)
            b = np.repeat(b, L, axis=0)
        parts = [a.reshape(-1), b.reshape(-1)]
        if w is not None:
            w = np.broadcast_to(np.atleast_2d(np.asarray(w, dtype=float)), (L, a.shape[1]))
            parts.append(w.reshape(-1))
        return cls(schedule, a.shape[1], np.concatenate(parts), conditional=w is not None)

    @classmethod
    def optimal(cls, dist: DiagGaussian, schedule: NoiseSchedule) -> "LinearScoreModel":
        """Exact minimiser of both score-matching losses, level by level."""
        pairs = [optimal_linear_params(dist, s) for s in schedule]
        return cls.from_arrays(schedule, [p[0] for p in pairs], [p[1] for p in pairs])

    def _level(self, sigma_t: float):
        i = self.schedule.index(sigma_t)
        L, d = len(self.schedule), self.dim
        a = self.params["a"].reshape(L, d)[i]
        b = self.params["b"].reshape(L, d)[i]
        w = self.params["w"].reshape(L, d)[i] if self.cond_dim else None
        return i, a, b, w

    def _forward(self, x, sigma_t, c):
        _, a, b, w = self._level(sigma_t)
        out = a * x + b
        if w is not None:
            out = out + w * c
        return out

    def _vjp(self, x, sigma_t, c, u, per_sample):
        i, a, _, w = self._level(sigma_t)
        n, d = x.shape
        L = len(self.schedule)
        dp = np.zeros((n, self.n_params))
        blocks = [u * x, u] + ([u * c] if w is not None else [])
        for j, block in enumerate(blocks):
            off = j * L * d + i * d
            dp[:, off : off + d] = block
        dc = w * u if w is not None else np.zeros((n, 0))
        return (dp if per_sample else dp.sum(axis=0)), a * u, dc

    def with_params(self, values) -> "LinearScoreModel":
        return LinearScoreModel(self.schedule, self.dim, values, conditional=bool(self.cond_dim))


class MlpScoreModel(ScoreModel):
    """tanh MLP on ``[x_t, log sigma_t, c]`` with a linear output layer of width ``d``."""

    def __init__(self, dim: int, hidden: Sequence[int], cond_dim: int = 0, params=None, rng=None):
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.hidden = tuple(int(h) for h in hidden)
        if any(h < 1 for h in self.hidden):
            raise InvalidArgument(f"hidden widths must be positive, got {self.hidden}")
        self.widths = (self.dim + 1 + self.cond_dim,) + self.hidden + (self.dim,)
        layout, pos = {}, 0
        for l, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            layout[f"W{l}"] = (pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            layout[f"b{l}"] = (pos, pos + fan_out)
            pos += fan_out
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            values = np.empty(pos)
            for l, fan_in in enumerate(self.widths[:-1]):
                bound = 1.0 / np.sqrt(fan_in)
                for name in (f"W{l}", f"b{l}"):
                    a, b = layout[name]
                    values[a:b] = rng.uniform(-bound, bound, size=b - a)
        else:
            values = np.asarray(params.values if isinstance(params, ParamVector) else params, dtype=float)
            if values.shape != (pos,):
                raise InvalidArgument(f"MLP needs {pos} parameters, got {values.shape}")
            values = values.copy()
        self.params = ParamVector(values, layout)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def layer(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        W = self.params[f"W{l}"].reshape(self.widths[l + 1], self.widths[l])
        return W, self.params[f"b{l}"]

    def _inputs(self, x, sigma_t, c):
        emb = np.full((x.shape[0], 1), np.log(sigma_t))
        return np.concatenate([x, emb, c], axis=1)

    def _activations(self, x, sigma_t, c) -> list[np.ndarray]:
        acts = [self._inputs(x, sigma_t, c)]
        for l in range(self.n_layers):
            W, b = self.layer(l)
            z = acts[-1] @ W.T + b
            acts.append(np.tanh(z) if l < self.n_layers - 1 else z)
        return acts

    def _forward(self, x, sigma_t, c):
        return self._activations(x, sigma_t, c)[-1]

    def value_and_vjp(self, x_t, sigma_t: float, c, upstream_fn, per_sample: bool = False):
        xb, _ = _batch(x_t, self.dim)
        cb = _cond_batch(c, xb.shape[0], self.cond_dim)
        acts = self._activations(xb, float(sigma_t), cb)
        out = acts[-1]
        return (out, *self._backward(acts, upstream_fn(out), per_sample))

    def _vjp(self, x, sigma_t, c, u, per_sample):
        return self._backward(self._activations(x, sigma_t, c), u, per_sample)

    def _backward(self, acts, u, per_sample):
        n = u.shape[0]
        dp = np.empty((n, self.n_params)) if per_sample else np.empty(self.n_params)
        delta = u
        for l in reversed(range(self.n_layers)):
            W, _ = self.layer(l)
            a, b = self.params.layout[f"W{l}"]
            if per_sample:
                dp[:, a:b] = (delta[:, :, None] * acts[l][:, None, :]).reshape(n, -1)
            else:
                dp[a:b] = (delta.T @ acts[l]).reshape(-1)
            a, b = self.params.layout[f"b{l}"]
            if per_sample:
                dp[:, a:b] = delta
            else:
                dp[a:b] = delta.sum(axis=0)
            delta = delta @ W
            if l > 0:
                delta = delta * (1.0 - acts[l] ** 2)
        return dp, delta[:, : self.dim], delta[:, self.dim + 1 :]

    def with_params(self, values) -> "MlpScoreModel":
        return MlpScoreModel(self.dim, self.hidden, self.cond_dim, params=values)


class ExactScoreModel(ScoreModel):
    """Frozen exact score of ``dist`` under the forward process; has no parameters.

    The condition argument is accepted and ignored.
    """

    def __init__(self, dist):
        self.dist = dist
        self.dim = as_mixture(dist).dim
        self.cond_dim = 0
        self.params = ParamVector(np.zeros(0), {})

    def eval(self, x_t, sigma_t: float, c=None) -> np.ndarray:
        return marginal_score(self.dist, x_t, sigma_t)

    def vjp(self, x_t, sigma_t: float, c, upstream, per_sample: bool = False):
        xb, _ = _batch(x_t, self.dim)
        ub = np.atleast_2d(np.asarray(upstream, dtype=float))
        dx = marginal_score_hvp(self.dist, xb, sigma_t, ub)
        m = 0 if c is None else np.atleast_2d(np.asarray(c)).shape[1]
        dp = np.zeros((xb.shape[0], 0)) if per_sample else np.zeros(0)
        return dp, dx, np.zeros((xb.shape[0], m))

    def with_params(self, values) -> "ExactScoreModel":
        return self


class ConditionalScoreOracle:
    """Pointwise denoising target ``grad log q(x_t | x)``; sees the clean sample.

    Only meaningful inside the objective estimators, which pass ``x`` through.
    """

    uses_clean_sample = True
    cond_dim = 0
    n_params = 0

    def __init__(self, dim: int):
        self.dim = int(dim)

    def eval_with_clean(self, x_t, x, sigma_t: float) -> np.ndarray:
        return conditional_score(x_t, x, sigma_t)


def optimal_linear_params(dist: DiagGaussian, sigma_t: float) -> tuple[np.ndarray, np.ndarray]:
    """Slope and offset at which the linear score equals the exact noised score."""
    if not sigma_t > 0:
        raise InvalidArgument(f"sigma_t must be > 0, got {sigma_t}")
    v = dist.var + sigma_t**2
    return -1.0 / v, dist.mean / v


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: str
    errors: dict[str, float] = field(repr=False, default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def fd_gradient_check(
    model: ScoreModel,
    point,
    tolerance: float,
    step: float = 1e-5,
    floor: float = 1e-3,
    grad_fn: Callable | None = None,
) -> GradCheckReport:
    """Compare analytic parameter and condition gradients with central differences.

    ``point`` is ``(x_t, sigma_t, c, upstream)``; the scalar being differentiated
    is ``sum(upstream * eval(x_t, sigma_t, c))``. Relative errors use
    ``max(|analytic|, |numeric|, floor)`` as the scale. ``grad_fn`` replaces
    ``model.vjp`` (negative controls).
    """
    if not tolerance > 0:
        raise InvalidArgument("tolerance must be > 0")
    x_t, sigma_t, c, upstream = point
    xb = np.atleast_2d(np.asarray(x_t, dtype=float))
    ub = np.atleast_2d(np.asarray(upstream, dtype=float))
    cb = None if c is None else np.atleast_2d(np.asarray(c, dtype=float))
    vjp = grad_fn or model.vjp
    dp, _, dc = vjp(xb, sigma_t, cb, ub)

    def objective(m, cc):
        return float(np.sum(ub * m.eval(xb, sigma_t, cc)))

    theta = model.params.values
    num_p = np.empty_like(theta)
    for i in range(theta.size):
        hi, lo = theta.copy(), theta.copy()
        hi[i] += step
        lo[i] -= step
        num_p[i] = (objective(model.with_params(hi), cb) - objective(model.with_params(lo), cb)) / (2 * step)
    errors = {f"param[{i}]": e for i, e in enumerate(_rel_err(np.asarray(dp), num_p, floor))}
    if model.cond_dim:
        num_c = np.empty_like(cb)
        for idx in np.ndindex(cb.shape):
            hi, lo = cb.copy(), cb.copy()
            hi[idx] += step
            lo[idx] -= step
            num_c[idx] = (objective(model, hi) - objective(model, lo)) / (2 * step)
        for idx, e in zip(np.ndindex(cb.shape), _rel_err(np.asarray(dc), num_c, floor).reshape(-1)):
            errors[f"cond{list(idx)}"] = e
    worst = max(errors, key=errors.get) if errors else ""
    return GradCheckReport(float(errors[worst]) if errors else 0.0, tolerance, worst, errors)


def save_checkpoint(model: ScoreModel, path) -> None:
    """Write ``key = value`` lines; floats use ``repr`` so they round-trip exactly."""
    lines = ["# dsmbias checkpoint v1"]
    if isinstance(model, LinearScoreModel):
        lines += [
            "kind = linear",
            f"dim = {model.dim}",
            f"cond_dim = {model.cond_dim}",
            "sigmas = " + ",".join(repr(s) for s in model.schedule.sigmas),
        ]
    elif isinstance(model, MlpScoreModel):
        lines += [
            "kind = mlp",
            f"dim = {model.dim}",
            f"cond_dim = {model.cond_dim}",
            "hidden = " + ",".join(str(h) for h in model.hidden),
        ]
    else:
        raise InvalidArgument(f"cannot serialise {type(model).__name__}")
    lines.append("layout = " + model.params.layout_string())
    lines.append("values = " + ",".join(repr(float(v)) for v in model.params.values))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> ScoreModel:
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        values = np.array([float(v) for v in fields["values"].split(",") if v], dtype=float)
        kind = fields["kind"]
        dim, cond_dim = int(fields["dim"]), int(fields["cond_dim"])
        if kind == "linear":
            schedule = NoiseSchedule([float(s) for s in fields["sigmas"].split(",")])
            model = LinearScoreModel(schedule, dim, values, conditional=bool(cond_dim))
        elif kind == "mlp":
            hidden = [int(h) for h in fields["hidden"].split(",") if h]
            model = MlpScoreModel(dim, hidden, cond_dim, params=values)
        else:
            raise InvalidArgument(f"unknown checkpoint kind {kind!r}")
    except KeyError as exc:
        raise InvalidArgument(f"checkpoint {path} is missing field {exc}") from None
    if ParamVector.parse_layout(fields.get("layout", "")) != model.params.layout:
        raise InvalidArgument(f"checkpoint {path} layout does not match its architecture")
    return model
