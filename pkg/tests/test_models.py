import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsmbias.analytic import DiagGaussian, NoiseSchedule, marginal_score
from dsmbias.errors import InvalidArgument
from dsmbias.models import (
    ConditionalScoreOracle,
    ExactScoreModel,
    LinearScoreModel,
    MlpScoreModel,
    ParamVector,
    fd_gradient_check,
    load_checkpoint,
    optimal_linear_params,
    save_checkpoint,
)

SCHED = NoiseSchedule([0.5, 1.0, 2.0])


def models(rng):
    return [
        LinearScoreModel(SCHED, 2, rng.normal(size=12)),
        LinearScoreModel(SCHED, 2, rng.normal(size=18), conditional=True),
        MlpScoreModel(2, [6], rng=rng),
        MlpScoreModel(2, [5, 4], cond_dim=3, rng=rng),
        MlpScoreModel(1, [3, 3, 3], cond_dim=1, rng=rng),
    ]


def point(rng, model, n=4, sigma=1.0):
    c = rng.normal(size=(n, model.cond_dim)) if model.cond_dim else None
    return rng.normal(size=(n, model.dim)), sigma, c, rng.normal(size=(n, model.dim))


class TestParamVector:
    def test_layout_must_partition(self):
        with pytest.raises(InvalidArgument):
            ParamVector(np.zeros(3), {"a": (0, 2)})
        with pytest.raises(InvalidArgument):
            ParamVector(np.zeros(3), {"a": (0, 2), "b": (1, 3)})

    def test_arithmetic_and_layout_string(self):
        p = ParamVector(np.arange(4.0), {"a": (0, 1), "b": (1, 4)})
        np.testing.assert_array_equal((p + p * 2.0)["b"], [3.0, 6.0, 9.0])
        assert ParamVector.parse_layout(p.layout_string()) == p.layout
        assert p.norm() == pytest.approx(np.sqrt(14.0))


class TestGradients:
    @pytest.mark.parametrize("idx", range(5))
    def test_finite_difference(self, idx):
        rng = np.random.default_rng(idx)
        model = models(rng)[idx]
        report = fd_gradient_check(model, point(rng, model), tolerance=1e-5)
        assert report.passed, (report.worst, report.max_rel_error)

    def test_corrupted_gradient_is_caught(self):
        rng = np.random.default_rng(3)
        model = MlpScoreModel(2, [4], rng=rng)

        def broken(*args, **kw):
            dp, dx, dc = model.vjp(*args, **kw)
            dp = dp.copy()
            dp[0] += 1e-3 * max(1.0, abs(dp[0]))
            return dp, dx, dc

        assert not fd_gradient_check(model, point(rng, model), tolerance=1e-5, grad_fn=broken).passed

    def test_input_gradient_finite_difference(self):
        rng = np.random.default_rng(11)
        for model in models(rng):
            x, s, c, u = point(rng, model, n=1)
            _, dx, _ = model.vjp(x, s, c, u)
            h = 1e-6
            for i in range(model.dim):
                e = np.zeros_like(x)
                e[0, i] = h
                fd = (np.sum(u * model.eval(x + e, s, c)) - np.sum(u * model.eval(x - e, s, c))) / (2 * h)
                assert dx[0, i] == pytest.approx(fd, rel=1e-6, abs=1e-8)

    @given(k1=st.floats(-3, 3), k2=st.floats(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_vjp_linear_in_upstream(self, k1, k2):
        rng = np.random.default_rng(0)
        model = MlpScoreModel(2, [5], cond_dim=1, rng=rng)
        x, s, c, u1 = point(rng, model)
        u2 = rng.normal(size=u1.shape)
        combo = model.vjp(x, s, c, k1 * u1 + k2 * u2)
        parts = [model.vjp(x, s, c, u) for u in (u1, u2)]
        for j in range(3):
            np.testing.assert_allclose(combo[j], k1 * parts[0][j] + k2 * parts[1][j], atol=1e-10)

    def test_per_sample_rows_sum_to_batch_gradient(self):
        rng = np.random.default_rng(5)
        for model in models(rng):
            x, s, c, u = point(rng, model, n=7)
            rows, _, _ = model.vjp(x, s, c, u, per_sample=True)
            total, _, _ = model.vjp(x, s, c, u)
            np.testing.assert_allclose(rows.sum(axis=0), total, atol=1e-12)

    def test_value_and_vjp_matches_separate_calls(self):
        rng = np.random.default_rng(6)
        model = MlpScoreModel(2, [5, 4], cond_dim=3, rng=rng)
        x, s, c, _ = point(rng, model)
        out, dp, dx, dc = model.value_and_vjp(x, s, c, lambda o: o - 1.0)
        np.testing.assert_array_equal(out, model.eval(x, s, c))
        for a, b in zip((dp, dx, dc), model.vjp(x, s, c, out - 1.0)):
            np.testing.assert_allclose(a, b, atol=1e-14)


class TestLinearModel:
    def test_optimum_equals_marginal_score(self):
        dist = DiagGaussian.from_std([0.7, -1.2], [0.4, 1.5])
        model = LinearScoreModel.optimal(dist, SCHED)
        x = np.random.default_rng(1).normal(size=(30, 2))
        for s in SCHED:
            np.testing.assert_allclose(model.eval(x, s), marginal_score(dist, x, s), atol=1e-12)

    def test_optimal_params(self):
        a, b = optimal_linear_params(DiagGaussian([2.0], [0.0]), 1.0)
        assert a[0] == -0.5 and b[0] == 1.0

    def test_unknown_level_rejected(self):
        with pytest.raises(InvalidArgument):
            LinearScoreModel(SCHED, 1).eval([0.0], 0.7)

    def test_condition_required(self):
        model = LinearScoreModel(SCHED, 1, conditional=True)
        with pytest.raises(InvalidArgument):
            model.eval([0.0], 1.0)


class TestMlp:
    def test_deterministic_given_rng(self):
        a = MlpScoreModel(2, [8, 8], rng=np.random.default_rng(4))
        b = MlpScoreModel(2, [8, 8], rng=np.random.default_rng(4))
        np.testing.assert_array_equal(a.params.values, b.params.values)
        x = np.ones((3, 2))
        np.testing.assert_array_equal(a.eval(x, 0.5), b.eval(x, 0.5))

    def test_bad_shapes(self):
        with pytest.raises(InvalidArgument):
            MlpScoreModel(2, [0])
        with pytest.raises(InvalidArgument):
            MlpScoreModel(2, [4], rng=np.random.default_rng()).eval(np.zeros((3, 3)), 1.0)
        with pytest.raises(InvalidArgument):
            MlpScoreModel(2, [4], params=np.zeros(5))

    def test_single_input_returns_vector(self):
        model = MlpScoreModel(2, [4], rng=np.random.default_rng(0))
        assert model.eval(np.zeros(2), 1.0).shape == (2,)


class TestExactAndOracle:
    def test_exact_model(self):
        dist = DiagGaussian([1.0], [0.0])
        m = ExactScoreModel(dist)
        assert m.n_params == 0
        np.testing.assert_allclose(m.eval([[3.0]], 1.0), [[-1.0]])

    def test_conditional_oracle(self):
        o = ConditionalScoreOracle(1)
        np.testing.assert_allclose(o.eval_with_clean([[1.5]], [[1.0]], 1.0), [[-0.5]])


class TestCheckpoint:
    @pytest.mark.parametrize("idx", range(5))
    def test_round_trip(self, tmp_path, idx):
        rng = np.random.default_rng(idx)
        model = models(rng)[idx]
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert type(loaded) is type(model)
        np.testing.assert_array_equal(loaded.params.values, model.params.values)
        x, s, c, _ = point(rng, model)
        np.testing.assert_array_equal(loaded.eval(x, s, c), model.eval(x, s, c))

    def test_corrupt_checkpoint(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("kind = mlp\ndim = 1\n")
        with pytest.raises(InvalidArgument):
            load_checkpoint(path)

    def test_layout_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(MlpScoreModel(1, [2], rng=np.random.default_rng(0)), path)
        path.write_text(path.read_text().replace("W0:0:", "W0:1:"))
        with pytest.raises(InvalidArgument):
            load_checkpoint(path)

    def test_exact_model_not_serialisable(self, tmp_path):
        with pytest.raises(InvalidArgument):
            save_checkpoint(ExactScoreModel(DiagGaussian([0.0], [0.0])), tmp_path / "x")
