import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsmbias import faults
from dsmbias import objectives as obj
from dsmbias.analytic import (
    DiagGaussian,
    GaussianMixture,
    NoiseSchedule,
    c2_closed_form,
    marginal_score,
    quadrature_expectation,
)
from dsmbias.errors import InvalidArgument, Unsupported
from dsmbias.families import EncoderFamily, GaussianFamily, MixtureWeightFamily
from dsmbias.models import ConditionalScoreOracle, ExactScoreModel, LinearScoreModel, MlpScoreModel

STD = DiagGaussian([0.0], [0.0])
MIX = GaussianMixture.symmetric(2.0, 0.5)


def linear(a, b, sigma):
    return LinearScoreModel.from_arrays(NoiseSchedule([sigma]), [np.atleast_1d(a)], [np.atleast_1d(b)])


def batch(seed=0, n=200_000, d=1, eta=None):
    return obj.SampleBatch.generate(seed, n, d, eta)


class TestPlumbing:
    def test_mc_estimate(self):
        est = obj.MCEstimate.from_samples([1.0, 3.0])
        assert est.value == 2.0 and est.n == 2
        assert est.std_error == pytest.approx(np.sqrt(2.0) / np.sqrt(2.0))
        with pytest.raises(InvalidArgument):
            obj.MCEstimate.from_samples([1.0])

    def test_batch_regenerates_exactly(self):
        a, b = obj.SampleBatch.generate(42, 100, 2, 3), obj.SampleBatch.generate(42, 100, 2, 3)
        for f in ("pick", "eps", "nu", "eta"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
        assert a.eta.shape == (100, 3)

    def test_batch_draw_order(self):
        b = obj.SampleBatch.generate(7, 5, 2, 1)
        rng = obj.make_rng(7)
        np.testing.assert_array_equal(b.pick, rng.random(5))
        np.testing.assert_array_equal(b.eps, rng.standard_normal((5, 2)))
        np.testing.assert_array_equal(b.nu, rng.standard_normal((5, 2)))
        np.testing.assert_array_equal(b.eta, rng.standard_normal((5, 1)))

    def test_empty_batch_rejected(self):
        with pytest.raises(InvalidArgument):
            obj.SampleBatch.generate(0, 1, 1)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            obj.dsm_loss(linear(0, 0, 1.0), STD, 1.0, batch(d=2, n=10))

    def test_stream_splitting(self):
        a = obj.make_rng(3, 1).random(4)
        b = obj.make_rng(3, 2).random(4)
        assert not np.allclose(a, b)
        np.testing.assert_array_equal(a, obj.make_rng(3, 1).random(4))

    def test_sampling_picks_components_by_weight(self):
        mix = GaussianMixture([0.2, 0.8], [DiagGaussian([-5.0], [-3.0]), DiagGaussian([5.0], [-3.0])])
        x = obj.sample(mix, batch(n=100_000))
        frac = np.mean(x[:, 0] < 0)
        assert abs(frac - 0.2) <= 3 * np.sqrt(0.2 * 0.8 / 100_000)


class TestLossExamples:
    def test_zero_model_dsm(self):
        est = obj.dsm_loss(linear(0, 0, 1.0), STD, 1.0, batch())
        assert est.within(0.5)

    def test_conditional_oracle_dsm_is_zero(self):
        assert obj.dsm_loss(ConditionalScoreOracle(1), MIX, 0.7, batch(n=100)).value == 0.0

    def test_zero_model_esm(self):
        assert obj.esm_loss(linear(0, 0, 1.0), STD, 1.0, batch()).within(0.25)

    def test_optimal_linear_esm_is_zero(self):
        dist = DiagGaussian.from_std([0.4], [1.3])
        model = LinearScoreModel.optimal(dist, NoiseSchedule([0.8]))
        est = obj.esm_loss(model, dist, 0.8, batch(n=1000))
        assert est.value < 1e-25
        cf = obj.linear_closed_form(model.params["a"], model.params["b"], dist, 0.8)
        assert cf["esm"] == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(4))
    def test_linear_losses_match_closed_form(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        dist = DiagGaussian(rng.normal(0, 2, d), rng.uniform(-1, 0.5, d))
        sigma = float(rng.uniform(0.3, 2.0))
        a, b = rng.normal(size=d), rng.normal(size=d)
        model = LinearScoreModel.from_arrays(NoiseSchedule([sigma]), [a], [b])
        cf = obj.linear_closed_form(a, b, dist, sigma)
        bt = batch(seed, d=d)
        assert obj.dsm_loss(model, dist, sigma, bt).within(cf["dsm"])
        assert obj.esm_loss(model, dist, sigma, bt).within(cf["esm"])

    def test_c2_examples(self):
        assert obj.c2_term(STD, 1.0, batch()).within(0.25)
        q = quadrature_expectation(
            lambda xs: 0.5 * marginal_score(MIX, xs[:, None], 0.5)[:, 0] ** 2, MIX.noised(0.5), 96
        )
        assert obj.c2_term(MIX, 0.5, batch(1)).within(q)

    def test_c2_approaches_c3_from_below(self):
        dist = DiagGaussian.from_std([1.0], [0.7])
        ratios = [c2_closed_form(dist, s) / (0.5 / s**2) for s in (2.0, 8.0, 32.0, 128.0)]
        assert all(r < 1 for r in ratios)
        assert ratios == sorted(ratios)
        assert ratios[-1] > 1 - 1e-4

    @pytest.mark.parametrize("d,sigma", [(1, 1.0), (4, 2.0)])
    def test_c3_examples(self, d, sigma):
        assert obj.c3_term(d, sigma, batch(d=d)).within(0.5)

    def test_c3_independent_of_distribution(self):
        bt = batch(3, 50_000)
        ests = [obj.c3_term(1, 1.0, bt, DiagGaussian.from_std([m], [s])) for m, s in [(0, 1), (1e3, 0.1), (-5, 4)]]
        ref = obj.c3_term(1, 1.0, bt)
        for e in ests:
            assert abs(e.value - ref.value) < 3 * ref.std_error


class TestCrossTerms:
    def test_zero_model(self):
        zero = linear(0, 0, 1.0)
        assert obj.cross_term_marginal(zero, MIX, 1.0, batch(n=100)).value == 0.0
        assert obj.cross_term_conditional(zero, MIX, 1.0, batch(n=100)).value == 0.0

    def test_marginal_model_gives_twice_c2(self):
        bt = batch(4)
        est = obj.cross_term_marginal(ExactScoreModel(MIX), MIX, 0.7, bt)
        c2 = obj.c2_term(MIX, 0.7, bt)
        assert est.value == pytest.approx(2 * c2.value, rel=1e-12)

    def test_conditional_model_gives_twice_c3(self):
        bt = batch(5)
        est = obj.cross_term_conditional(ConditionalScoreOracle(1), MIX, 0.7, bt)
        assert est.value == pytest.approx(2 * obj.c3_term(1, 0.7, bt, MIX).value, rel=1e-12)
        assert est.within(2 * 0.5 / 0.49)

    def test_linear_gaussian_matches_quadrature(self):
        dist = DiagGaussian.from_std([0.5], [0.8])
        model = linear(0.7, -0.3, 1.0)
        q = quadrature_expectation(
            lambda xs: (0.7 * xs - 0.3) * marginal_score(dist, xs[:, None], 1.0)[:, 0], dist.noised(1.0), 64
        )
        assert obj.cross_term_marginal(model, dist, 1.0, batch(6)).within(q)
        assert obj.cross_term_conditional(model, dist, 1.0, batch(6)).within(q)

    def test_forms_agree_for_random_linear_models(self):
        rng = np.random.default_rng(8)
        for i in range(20):
            model = linear(rng.normal(), rng.normal(), 1.0)
            bt = batch(100 + i, 20_000)
            diff = obj.paired(
                [obj.cross_term_marginal(model, MIX, 1.0, bt), obj.cross_term_conditional(model, MIX, 1.0, bt)], [1, -1]
            )
            assert diff.within(0.0), i


class TestDecomposition:
    def test_linear_closed_form_identity_100_tuples(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            d = int(rng.integers(1, 5))
            dist = DiagGaussian(rng.normal(0, 3, d), rng.uniform(-2, 1, d))
            cf = obj.linear_closed_form(rng.normal(size=d), rng.normal(size=d), dist, float(rng.uniform(0.1, 3)))
            assert abs(cf["dsm"] - cf["esm"] - (cf["c3"] - cf["c2"])) <= 1e-10

    def test_mlp_on_mixture(self):
        model = MlpScoreModel(1, [8], rng=np.random.default_rng(0))
        assert obj.decomposition_residual(model, MIX, 0.8, batch(10, 50_000)).within(0.0)

    def test_perfect_score_model(self):
        assert obj.decomposition_residual(ExactScoreModel(MIX), MIX, 0.8, batch(11, 50_000)).within(0.0)

    def test_residual_rows_are_cross_term_difference(self):
        model = MlpScoreModel(1, [4], rng=np.random.default_rng(1))
        bt = batch(12, 1000)
        res = obj.decomposition_residual(model, MIX, 0.8, bt)
        m = obj.cross_term_marginal(model, MIX, 0.8, bt)
        c = obj.cross_term_conditional(model, MIX, 0.8, bt)
        np.testing.assert_allclose(res.samples, m.samples - c.samples, atol=1e-10)

    def test_faults_break_the_identity(self):
        model = linear(0.3, 0.1, 1.0)
        with faults.inject("c2-scale"):
            assert abs(obj.linear_closed_form(0.3, 0.1, STD, 1.0)["residual"]) > 1e-3
        with faults.inject("esm-target"):
            assert not obj.decomposition_residual(model, STD, 1.0, batch(13)).within(0.0)
        with pytest.raises(ValueError):
            with faults.inject("nope"):
                pass


class TestUnbiasedness:
    """Mean over 200 independent batches lies within 3 SE of the oracle."""

    @pytest.mark.parametrize(
        "name,fn,target",
        [
            ("dsm", lambda b: obj.dsm_loss(linear(0.4, -0.2, 0.9), STD, 0.9, b), None),
            ("esm", lambda b: obj.esm_loss(linear(0.4, -0.2, 0.9), STD, 0.9, b), None),
            ("c2", lambda b: obj.c2_term(STD, 0.9, b), None),
            ("c3", lambda b: obj.c3_term(1, 0.9, b), 0.5 / 0.81),
        ],
    )
    def test_mean_of_estimates(self, name, fn, target):
        if target is None:
            target = obj.linear_closed_form(0.4, -0.2, STD, 0.9)[name]
        vals = np.array([fn(batch(1000 + i, 200)).value for i in range(200)])
        assert abs(vals.mean() - target) <= 3 * vals.std(ddof=1) / np.sqrt(vals.size)


class TestCommonRandomNumbers:
    @pytest.mark.parametrize("dist,sigma", [(STD, 1.0), (MIX, 0.5), (DiagGaussian.from_std([1.0, 2.0], [0.3, 2.0]), 2.0)])
    def test_paired_variance_below_unpaired(self, dist, sigma):
        model = MlpScoreModel(dist.dim, [6], rng=np.random.default_rng(2))
        bt = batch(14, 20_000, dist.dim)
        d, e = obj.dsm_loss(model, dist, sigma, bt), obj.esm_loss(model, dist, sigma, bt)
        assert obj.paired([d, e], [1, -1]).std_error ** 2 < d.std_error**2 + e.std_error**2


class TestThetaGradients:
    def test_linear_closed_form_gradients_equal(self):
        rng = np.random.default_rng(15)
        for _ in range(100):
            d = int(rng.integers(1, 4))
            dist = DiagGaussian(rng.normal(0, 2, d), rng.uniform(-1, 0.5, d))
            g = obj.linear_closed_form_grads(rng.normal(size=d), rng.normal(size=d), dist, float(rng.uniform(0.2, 2)))
            for k in range(2):
                np.testing.assert_allclose(g["dsm"][k], g["esm"][k], atol=1e-10)

    def test_linear_closed_form_gradients_match_fd(self):
        dist = DiagGaussian.from_std([0.3, -1.0], [0.7, 1.2])
        a, b, s, h = np.array([0.2, -0.4]), np.array([0.5, 0.1]), 0.6, 1e-6
        for name in ("dsm", "esm"):
            da, db = obj.linear_closed_form_grads(a, b, dist, s)[name]
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                fa = (obj.linear_closed_form(a + e, b, dist, s)[name] - obj.linear_closed_form(a - e, b, dist, s)[name]) / (2 * h)
                fb = (obj.linear_closed_form(a, b + e, dist, s)[name] - obj.linear_closed_form(a, b - e, dist, s)[name]) / (2 * h)
                assert da[i] == pytest.approx(fa, rel=1e-7)
                assert db[i] == pytest.approx(fb, rel=1e-7, abs=1e-9)

    def test_mlp_gradients_agree_per_coordinate(self):
        model = MlpScoreModel(1, [4], rng=np.random.default_rng(16))
        bt = batch(17, 4096)
        gd, ge = obj.grad_theta("dsm", model, MIX, 1.0, bt), obj.grad_theta("esm", model, MIX, 1.0, bt)
        diff = gd.combine([ge], [1, -1])
        assert np.all(np.abs(diff.value) <= 3 * diff.std_error + 1e-8)

    @pytest.mark.parametrize("objective,fn", [("dsm", obj.dsm_loss), ("esm", obj.esm_loss)])
    def test_matches_finite_differences(self, objective, fn):
        model = MlpScoreModel(1, [3], rng=np.random.default_rng(18))
        bt = batch(19, 500)
        g = obj.grad_theta(objective, model, MIX, 0.8, bt).value
        theta, h = model.params.values, 1e-6
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd = (fn(model.with_params(theta + e), MIX, 0.8, bt).value - fn(model.with_params(theta - e), MIX, 0.8, bt).value) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_params_view(self):
        model = MlpScoreModel(1, [3], rng=np.random.default_rng(0))
        g = obj.grad_theta("dsm", model, MIX, 0.8, batch(n=10))
        assert g.params().layout == model.params.layout

    def test_theta_terms_match_separate_estimators(self):
        model = MlpScoreModel(1, [4], rng=np.random.default_rng(3))
        bt = batch(20, 1000)
        terms, grad = obj.theta_terms("esm", model, MIX, 0.8, bt)
        assert terms["dsm"].value == pytest.approx(obj.dsm_loss(model, MIX, 0.8, bt).value, rel=1e-12)
        assert terms["esm"].value == pytest.approx(obj.esm_loss(model, MIX, 0.8, bt).value, rel=1e-12)
        np.testing.assert_allclose(grad, obj.grad_theta("esm", model, MIX, 0.8, bt).value, atol=1e-12)


class TestConditionGradients:
    def test_gaussian_c2_mean_gradient_zero(self):
        fam = GaussianFamily(1)
        model = fam.oracle_model([0.3, 0.0], NoiseSchedule([1.0]))
        g = obj.grad_condition_total("c2", model, fam, [0.3, 0.0], 1.0, batch(21, 100_000))
        assert np.all(g.per_sample[:, 0] == 0.0)
        assert g.value[1] == pytest.approx(-0.25, abs=3 * g.std_error[1])

    def test_c2_log_std_gradient_matches_closed_form(self):
        fam = GaussianFamily(1)
        for s, sigma in [(1.0, 1.0), (0.5, 0.7), (2.0, 0.3)]:
            phi = [0.0, np.log(s)]
            g = obj.grad_condition_total("c2", fam.oracle_model(phi, NoiseSchedule([sigma])), fam, phi, sigma, batch(22, 100_000))
            exact = -(s**2) / (s**2 + sigma**2) ** 2
            h = 1e-6
            fd = (fam.c2_exact([0.0, np.log(s) + h], sigma) - fam.c2_exact([0.0, np.log(s) - h], sigma)) / (2 * h)
            assert exact == pytest.approx(fd, rel=1e-7)
            assert abs(g.value[1] - exact) <= 3 * g.std_error[1]

    @pytest.mark.parametrize("which", ["gaussian", "encoder"])
    def test_three_way_identity(self, which):
        rng = np.random.default_rng(23)
        if which == "gaussian":
            fam, phi = GaussianFamily(1), np.array([0.4, -0.3])
        else:
            fam, phi = EncoderFamily(DiagGaussian([0.2], [0.1])), np.array([0.9])
        model = MlpScoreModel(1, [6], cond_dim=fam.cond_dim, rng=rng)
        bt = batch(24, 20_000)
        g = {k: obj.grad_condition_total(k, model, fam, phi, 0.8, bt) for k in ("dsm", "esm", "c2")}
        diff = g["dsm"].combine([g["esm"], g["c2"]], [1, -1, 1])
        assert np.all(np.abs(diff.value) <= 3 * diff.std_error + 1e-8)

    @pytest.mark.parametrize("objective", ["dsm", "esm", "c2"])
    @pytest.mark.parametrize("which", ["gaussian", "encoder"])
    def test_pathwise_matches_finite_differences(self, objective, which):
        rng = np.random.default_rng(25)
        if which == "gaussian":
            fam, phi = GaussianFamily(2), rng.normal(size=4) * 0.5
        else:
            fam, phi = EncoderFamily(DiagGaussian([0.2, -0.4], [0.1, -0.3]), 0.7), np.array([1.3])
        model = MlpScoreModel(fam.dim, [5], cond_dim=fam.cond_dim, rng=rng)
        bt = batch(26, 300, fam.dim)

        def value(p):
            pd = fam.draw(p, 0.6, bt)
            if objective == "c2":
                return np.mean(0.5 * np.sum(pd.score**2, axis=1))
            s = model.eval(pd.x_t, 0.6, pd.cond)
            target = -(pd.x_t - pd.x) / 0.36 if objective == "dsm" else pd.score
            return np.mean(0.5 * np.sum((s - target) ** 2, axis=1))

        g = obj.grad_condition_total(objective, model, fam, phi, 0.6, bt).value
        h = 1e-6
        for k in range(phi.size):
            e = np.zeros_like(phi)
            e[k] = h
            fd = (value(phi + e) - value(phi - e)) / (2 * h)
            assert g[k] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_c3_gradient_identically_zero(self):
        for fam, phi in [(GaussianFamily(2), np.array([0.1, 2.0, -0.5, 0.3])), (EncoderFamily(DiagGaussian([0.0], [0.0])), [2.0])]:
            model = fam.oracle_model(phi, NoiseSchedule([1.0]))
            g = obj.grad_condition_total("c3", model, fam, phi, 1.0, batch(27, 500, fam.dim))
            assert np.all(g.per_sample == 0.0)

    def test_non_pathwise_family_unsupported(self):
        fam = MixtureWeightFamily()
        with pytest.raises(Unsupported):
            obj.grad_condition_total("dsm", ExactScoreModel(fam.dist([0.0])), fam, [0.0], 1.0, batch(n=10))

    def test_mixture_weight_gradient_matches_component_losses(self):
        fam = MixtureWeightFamily((-1.0, 1.0), 0.5)
        model = ExactScoreModel(fam.dist([0.3]))
        g = obj.grad_mixture_weight(model, fam, [0.3], 0.5, batch(28, 200_000))
        w = fam.weight([0.3])
        l1, l2 = (obj.dsm_loss(model, c, 0.5, batch(29 + i, 200_000)) for i, c in enumerate(fam.components))
        target = w * (1 - w) * (l1.value - l2.value)
        se = np.hypot(g.std_error[0], w * (1 - w) * np.hypot(l1.std_error, l2.std_error))
        assert abs(g.value[0] - target) <= 3 * se


class TestDistributionGradients:
    def test_stationary_mean_and_shrinking_scale(self):
        frozen = ExactScoreModel(STD)
        bt = batch(30, 200_000)
        gd = obj.grad_distribution("dsm", frozen, ([0.0], [0.0]), 1.0, bt)
        ge = obj.grad_distribution("esm", frozen, ([0.0], [0.0]), 1.0, bt)
        assert abs(gd.value[0]) <= 3 * gd.std_error[0]
        assert abs(ge.value[1]) <= 3 * ge.std_error[1] + 1e-8
        # the descent step on log u is negative: minimising DSM shrinks the scale
        assert gd.value[1] > 3 * gd.std_error[1]
        assert abs(gd.value[1] - 0.25) <= 3 * gd.std_error[1]

    def test_three_way_identity_for_source_parameters(self):
        frozen = ExactScoreModel(MIX)
        bt = batch(31, 20_000)
        g = {k: obj.grad_distribution(k, frozen, ([0.7], [-0.4]), 0.5, bt) for k in ("dsm", "esm", "c2")}
        diff = g["dsm"].combine([g["esm"], g["c2"]], [1, -1, 1])
        assert np.all(np.abs(diff.value) <= 3 * diff.std_error + 1e-8)

    @given(m=st.floats(-2, 2), lu=st.floats(-1, 0.5), sigma=st.floats(0.3, 2.0))
    @settings(max_examples=15, deadline=None)
    def test_dsm_minus_esm_equals_minus_c2_gradient_closed_form(self, m, lu, sigma):
        # frozen model = exact score of the current p: ESM gradient is the model-mismatch term only
        p = DiagGaussian([m], [lu])
        g = obj.grad_distribution("c2", ExactScoreModel(p), ([m], [lu]), sigma, batch(32, 20_000))
        u2 = np.exp(2 * lu)
        assert abs(g.value[1] + u2 / (u2 + sigma**2) ** 2) <= 3 * g.std_error[1] + 1e-8
        assert np.all(g.per_sample[:, 0] == 0.0)
