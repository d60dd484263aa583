import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from scorelab.generators import (DataBatch, DomainError, GeneratorSpec,
                                 NoiseConfig, circle_generator, make_affine,
                                 make_constant, make_polynomial,
                                 make_trigonometric, ou_coeffs, sample_clean,
                                 sample_noisy, sample_ou_pair)

LN2 = math.log(2.0)


class TestGeneratorEval:
    def test_constant_map(self):
        gen = make_constant([0.3, -0.2])
        for u in (np.zeros((1, 0)), np.zeros((3, 0))):
            out = gen(u)
            assert np.allclose(out, [0.3, -0.2])

    def test_affine_direct(self):
        gen = make_affine([[0.5]])
        assert gen(np.array([0.4])) == pytest.approx(0.2)

    def test_trigonometric_quarter_turn(self):
        # independent high-precision values of sin/cos at u = 1/4
        gen = make_trigonometric([0.5, 0.5], [[1.0], [1.0]],
                                 [0.0, 0.5 * np.pi])
        out = gen(np.array([0.25]))
        assert out[0] == pytest.approx(0.5 * math.sin(0.5 * math.pi), abs=1e-15)
        assert out[1] == pytest.approx(0.5 * math.cos(0.5 * math.pi), abs=1e-15)

    def test_polynomial_eval(self):
        gen = make_polynomial(
            [{"exponents": [2], "coeff": [0.5]},
             {"exponents": [0], "coeff": [0.25]}], d=1, D=1)
        assert gen(np.array([0.5])) == pytest.approx(0.5 * 0.25 + 0.25)

    def test_outside_cube_rejected(self):
        gen = make_affine([[0.5]])
        with pytest.raises(DomainError):
            gen(np.array([1.5]))

    def test_norm_bound_enforced(self):
        with pytest.raises(DomainError):
            GeneratorSpec("constant", 0, 1, {"value": [2.0]})

    def test_auto_rescaling(self):
        gen = make_trigonometric([3.0, 4.0], [[1.0], [2.0]])
        assert gen.analytic_sup_bound() <= 1.0 + 1e-12

    def test_d_leq_D(self):
        with pytest.raises(DomainError):
            GeneratorSpec("affine", 2, 1, {"matrix": [[0.1, 0.1]], "offset": [0.0]})


class TestBoundedness:
    @pytest.mark.parametrize("gen", [
        make_constant([0.3, -0.2]),
        make_affine([[0.5], [-0.3]], [0.2, 0.1]),
        circle_generator(D=3),
        make_polynomial([{"exponents": [1, 1], "coeff": [0.4, -0.3]}], d=2, D=2),
    ])
    def test_clean_samples_inside_unit_ball(self, gen):
        batch = sample_clean(gen, 500, seed=1)
        assert np.linalg.norm(batch.rows, axis=1).max() <= 1.0 + 1e-9


class TestNoiseConfig:
    def test_valid_range(self):
        cfg = NoiseConfig(0.4, 0.3)
        assert cfg.sigma_min == 0.3

    def test_default_sigma_min(self):
        assert NoiseConfig(0.4).sigma_min == 0.4

    @pytest.mark.parametrize("sigma,sigma_min", [(1.0, 0.5), (0.3, 0.4),
                                                 (0.3, 0.0), (-0.1, -0.1)])
    def test_invalid_rejected(self, sigma, sigma_min):
        with pytest.raises(DomainError):
            NoiseConfig(sigma, sigma_min)


class TestSampling:
    def test_zero_noise_constant_rows(self):
        gen = make_constant([0.3, -0.2])
        batch = sample_noisy(gen, NoiseConfig(0.0, 0.0), 3, seed=4)
        assert np.allclose(batch.rows, [0.3, -0.2])

    def test_determinism(self):
        gen = circle_generator()
        noise = NoiseConfig(0.4)
        a = sample_noisy(gen, noise, 64, seed=9)
        b = sample_noisy(gen, noise, 64, seed=9)
        assert np.array_equal(a.rows, b.rows)
        c = sample_noisy(gen, noise, 64, seed=10)
        assert not np.array_equal(a.rows, c.rows)

    def test_law_of_large_numbers(self):
        # per-coordinate mean within 3 sigma/sqrt(n) of the constant center
        gen = make_constant([0.3, -0.2])
        sigma, n = 0.5, 10 ** 5
        batch = sample_noisy(gen, NoiseConfig(sigma, 0.4), n, seed=11)
        tol = 3.0 * sigma / math.sqrt(n)
        assert np.abs(batch.rows.mean(axis=0) - [0.3, -0.2]).max() < tol

    def test_rows_immutable(self):
        batch = sample_noisy(circle_generator(), NoiseConfig(0.4), 8, seed=0)
        with pytest.raises(ValueError):
            batch.rows[0, 0] = 1.0

    def test_n_must_be_positive(self):
        with pytest.raises(DomainError):
            sample_noisy(circle_generator(), NoiseConfig(0.4), 0, seed=0)


class TestOuCoeffs:
    def test_identity_time(self):
        assert ou_coeffs(0.0) == (1.0, 0.0)

    def test_half_life(self):
        m, s2 = ou_coeffs(LN2)
        assert m == pytest.approx(0.5, abs=1e-15)
        assert s2 == pytest.approx(0.75, abs=1e-15)

    def test_long_time_asymptote(self):
        m, s2 = ou_coeffs(50.0)
        assert abs(m) < 1e-20
        assert abs(s2 - 1.0) < 1e-20

    def test_negative_time_rejected(self):
        with pytest.raises(DomainError):
            ou_coeffs(-0.1)


class TestOuPairs:
    def test_stored_noise_consistency(self):
        gen = circle_generator()
        batch = sample_ou_pair(gen, NoiseConfig(0.4), LN2, 128, seed=5)
        assert np.all(batch.ou_residual() == 0.0)

    def test_conditional_mean(self):
        # X_t averages to m_t X_0 given X_0, Monte Carlo over the noise
        gen = make_constant([0.3, -0.2])
        n = 10 ** 5
        batch = sample_ou_pair(gen, NoiseConfig(0.0, 0.0), LN2, n, seed=6)
        m_t, sig_sq = ou_coeffs(LN2)
        tol = 3.0 * math.sqrt(sig_sq) / math.sqrt(n)
        target = m_t * np.array([0.3, -0.2])
        assert np.abs(batch.rows.mean(axis=0) - target).max() < tol

    def test_marginal_noise_variance(self):
        gen = make_constant([0.3, -0.2])
        n = 10 ** 5
        batch = sample_ou_pair(gen, NoiseConfig(0.4), LN2, n, seed=7)
        _, sig_sq = ou_coeffs(LN2)
        resid = batch.rows - 0.5 * batch.x0
        var = resid.var(axis=0)
        assert np.abs(var - sig_sq).max() < 0.05 * sig_sq

    def test_t_zero_rejected(self):
        with pytest.raises(DomainError):
            sample_ou_pair(circle_generator(), NoiseConfig(0.4), 0.0, 4, seed=0)


class TestSerialization:
    @pytest.mark.parametrize("gen", [
        make_constant([0.3, -0.2]),
        make_affine([[0.5], [-0.3]], [0.2, 0.1], beta=1.5),
        circle_generator(D=3, radius=0.4),
        make_polynomial([{"exponents": [2], "coeff": [0.5]}], d=1, D=1),
    ])
    def test_json_round_trip(self, gen):
        back = GeneratorSpec.from_json(gen.to_json())
        assert back == gen
        u = np.random.default_rng(0).random((16, gen.d))
        assert np.array_equal(gen(u), back(u))

    def test_unknown_key_rejected(self):
        obj = make_constant([0.1]).to_json_dict()
        obj["extra"] = 1
        with pytest.raises(DomainError):
            GeneratorSpec.from_json_dict(obj)

    def test_csv_export(self, tmp_path):
        batch = sample_noisy(circle_generator(D=3), NoiseConfig(0.4), 10, seed=2)
        path = tmp_path / "batch.csv"
        batch.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x0,x1,x2"
        assert len(lines) == 11
        back = np.loadtxt(path, delimiter=",", skiprows=1)
        assert np.allclose(back, batch.rows)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32), n=st.integers(1, 40))
def test_batch_shape_and_determinism(seed, n):
    gen = circle_generator()
    noise = NoiseConfig(0.4)
    a = sample_noisy(gen, noise, n, seed)
    b = sample_noisy(gen, noise, n, seed)
    assert a.rows.shape == (n, 2)
    assert np.array_equal(a.rows, b.rows)
