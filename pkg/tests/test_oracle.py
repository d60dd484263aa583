import math

import numpy as np
import pytest

from scorelab.generators import (DomainError, GeneratorSpec, NoiseConfig,
                                 circle_generator, make_affine, make_constant)
from scorelab.oracle import (OracleScore, check_derivative_bound, log_density,
                             make_context, posterior_mean, posterior_weights,
                             quadrature_convergence, sample_marginal,
                             true_score, true_score_divergence,
                             true_score_jacobian)

LN2 = math.log(2.0)


@pytest.fixture(scope="module")
def circle_ctx():
    return make_context(circle_generator(), NoiseConfig(0.4, 0.3))


class TestContext:
    def test_time_zero_variance(self):
        ctx = make_context(make_constant([0.2]), NoiseConfig(0.4))
        assert ctx.sigma_eff_sq == pytest.approx(0.16)
        assert ctx.gen_scale == 1.0

    def test_time_t_variance(self):
        # m_t^2 sigma^2 + sigma_t^2 at t = ln 2, sigma = 0.4
        ctx = make_context(circle_generator(), NoiseConfig(0.4), t=LN2)
        assert ctx.sigma_eff_sq == pytest.approx(0.25 * 0.16 + 0.75)
        assert ctx.gen_scale == pytest.approx(0.5)

    def test_constant_generator_single_node(self):
        ctx = make_context(make_constant([0.3, -0.2]), NoiseConfig(0.4))
        assert len(ctx.weights) == 1
        assert ctx.weights[0] == 1.0

    def test_weights_sum_to_one(self, circle_ctx):
        assert circle_ctx.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_latent_dim_limit(self):
        gen = GeneratorSpec("affine", 4, 4,
                            {"matrix": (0.1 * np.eye(4)).tolist(),
                             "offset": [0.0] * 4})
        with pytest.raises(DomainError):
            make_context(gen, NoiseConfig(0.4))

    def test_negative_t_rejected(self, ):
        with pytest.raises(DomainError):
            make_context(circle_generator(), NoiseConfig(0.4), t=-1.0)


class TestPosteriorWeights:
    def test_constant_single_atom(self):
        ctx = make_context(make_constant([0.3, -0.2]), NoiseConfig(0.4))
        w = posterior_weights(ctx, np.array([5.0, 5.0]))
        assert w.shape == (1,)
        assert w[0] == pytest.approx(1.0)

    def test_symmetry(self, circle_ctx):
        # equidistant from the two circle branches crossing the x-axis
        w = posterior_weights(circle_ctx, np.array([0.0, 0.0]))
        u = circle_ctx.nodes[:, 0]
        mirrored = np.argsort(np.abs((1.0 - u) % 1.0 - u[:, None]), axis=1)[:, 0]
        assert np.abs(w - w[mirrored]).max() < 1e-12

    def test_far_point_stays_normalized(self):
        ctx = make_context(circle_generator(), NoiseConfig(0.1, 0.1))
        w = posterior_weights(ctx, np.array([1e6, 1e6]))
        assert np.all(np.isfinite(w))
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        s = true_score(ctx, np.array([1e6, 1e6]))
        assert np.all(np.isfinite(s))

    def test_nan_rejected(self, circle_ctx):
        with pytest.raises(DomainError):
            posterior_weights(circle_ctx, np.array([np.nan, 0.0]))


class TestTrueScore:
    def test_constant_generator_gaussian_score(self):
        c = np.array([0.3, -0.2])
        sigma = 0.4
        ctx = make_context(make_constant(c), NoiseConfig(sigma))
        y = np.array([[0.7, 0.1], [-1.0, 2.0]])
        expect = (c - y) / sigma ** 2
        assert np.allclose(true_score(ctx, y), expect, atol=1e-13)

    def test_symmetry_axis_posterior_mean(self):
        # at the circle center the posterior mean is the branch midpoint (0, 0)
        ctx = make_context(circle_generator(), NoiseConfig(0.4))
        f = posterior_mean(ctx, np.array([0.0, 0.0]))
        assert np.abs(f).max() < 1e-10

    def test_affine_1d_vs_dense_quadrature(self):
        # brute-force 10^6-node midpoint rule as the independent oracle
        gen = make_affine([[0.5]])
        sigma, y = 0.3, 0.7
        ctx = make_context(gen, NoiseConfig(sigma), tol=1e-12)
        u = (np.arange(10 ** 6) + 0.5) / 10 ** 6
        g = 0.5 * u
        w = np.exp(-((y - g) ** 2) / (2 * sigma ** 2))
        f_ref = (g * w).sum() / w.sum()
        s_ref = (f_ref - y) / sigma ** 2
        s = float(true_score(ctx, np.array([y])))
        assert s == pytest.approx(s_ref, rel=1e-8)

    def test_gradient_of_log_density(self, circle_ctx):
        y = sample_marginal(circle_ctx, 40, seed=3)
        h = 1e-5
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (log_density(circle_ctx, y + e)
                  - log_density(circle_ctx, y - e)) / (2 * h)
            assert np.abs(true_score(circle_ctx, y)[:, i] - fd).max() < 1e-6


class TestScoreJacobian:
    def test_constant_generator_exact(self):
        sigma = 0.4
        ctx = make_context(make_constant([0.3, -0.2]), NoiseConfig(sigma))
        jac = true_score_jacobian(ctx, np.array([0.5, 0.5]))
        assert np.allclose(jac, -np.eye(2) / sigma ** 2, atol=1e-14)

    def test_matches_finite_differences(self, circle_ctx):
        y = sample_marginal(circle_ctx, 20, seed=4)
        jac = true_score_jacobian(circle_ctx, y)
        h = 1e-4
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (true_score(circle_ctx, y + e)
                  - true_score(circle_ctx, y - e)) / (2 * h)
            assert np.abs(jac[:, :, i] - fd).max() < 1e-5

    def test_symmetric(self, circle_ctx):
        y = sample_marginal(circle_ctx, 50, seed=5)
        jac = true_score_jacobian(circle_ctx, y)
        assert np.abs(jac - jac.swapaxes(1, 2)).max() < 1e-12

    def test_divergence_is_trace(self, circle_ctx):
        y = sample_marginal(circle_ctx, 10, seed=6)
        div = true_score_divergence(circle_ctx, y)
        tr = np.trace(true_score_jacobian(circle_ctx, y), axis1=1, axis2=2)
        assert np.allclose(div, tr)


class TestDerivativeBounds:
    def test_constant_saturates_first_order(self):
        c = np.array([0.3, -0.2])
        ctx = make_context(make_constant(c), NoiseConfig(0.4))
        far = np.array([[3.0, -2.0]])
        res = check_derivative_bound(ctx, far, 1)
        assert res["holds"]
        assert res["lhs"] == pytest.approx(res["rhs"], rel=1e-9)

    @pytest.mark.parametrize("k", [1, 2])
    @pytest.mark.parametrize("maker", [
        lambda: make_constant([0.3, -0.2]),
        lambda: make_affine([[0.5], [-0.3]], [0.2, 0.1]),
        lambda: circle_generator(),
    ])
    def test_sweep_holds(self, maker, k):
        ctx = make_context(maker(), NoiseConfig(0.4, 0.3))
        y = sample_marginal(ctx, 200, seed=7)
        assert check_derivative_bound(ctx, y, k)["holds"]

    def test_bad_order_rejected(self, circle_ctx):
        with pytest.raises(DomainError):
            check_derivative_bound(circle_ctx, np.zeros((1, 2)), 3)


class TestQuadrature:
    def test_node_doubling_converged(self, circle_ctx):
        assert quadrature_convergence(circle_ctx) < max(circle_ctx.tol, 1e-8)

    def test_time_t_context_consistent_with_pairs(self):
        # the time-t score of the OU marginal matches finite differences too
        ctx = make_context(circle_generator(), NoiseConfig(0.4), t=LN2)
        y = sample_marginal(ctx, 20, seed=8)
        h = 1e-5
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (log_density(ctx, y + e) - log_density(ctx, y - e)) / (2 * h)
            assert np.abs(true_score(ctx, y)[:, i] - fd).max() < 1e-6


class TestOracleScore:
    def test_adapter_matches_functions(self, circle_ctx):
        wrapper = OracleScore(circle_ctx)
        y = sample_marginal(circle_ctx, 12, seed=9)
        assert np.array_equal(wrapper.score(y), true_score(circle_ctx, y))
        assert np.array_equal(wrapper.score_jacobian(y),
                              true_score_jacobian(circle_ctx, y))
