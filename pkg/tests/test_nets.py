import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from scorelab.generators import DomainError
from scorelab.nets import (AffineScore, NetworkParams, ScoreModel, gelu,
                           gelu_prime, gelu_second, gelu_third,
                           jet_partial, net_divergence, net_forward,
                           net_jacobian, net_jets, net_value_and_jacobian,
                           perturbation_stability_audit, sobolev_monitor)
from scorelab.training import init_params

LN2 = math.log(2.0)


def identity_net(D):
    return NetworkParams([np.eye(D)], [np.zeros(D)])


@pytest.fixture
def random_net():
    return init_params((3, 8, 5, 3), seed=12)


class TestGelu:
    def test_zero(self):
        assert gelu(0.0) == 0.0

    def test_prime_at_zero(self):
        assert gelu_prime(0.0) == pytest.approx(0.5)

    def test_derivative_bounds_on_grid(self):
        x = np.linspace(-10, 10, 100_001)
        assert np.abs(gelu_prime(x)).max() <= 2.0
        assert np.abs(gelu_second(x)).max() <= 2.0

    def test_two_lipschitz_difference_quotients(self):
        x = np.linspace(-12, 12, 50_000)
        dq = np.abs(np.diff(gelu(x))) / np.diff(x)
        assert dq.max() <= 2.0
        dq1 = np.abs(np.diff(gelu_prime(x))) / np.diff(x)
        assert dq1.max() <= 2.0

    def test_derivatives_match_finite_differences(self):
        x = np.linspace(-4, 4, 41)
        h = 1e-6
        assert np.abs(gelu_prime(x)
                      - (gelu(x + h) - gelu(x - h)) / (2 * h)).max() < 1e-8
        assert np.abs(gelu_second(x)
                      - (gelu_prime(x + h) - gelu_prime(x - h)) / (2 * h)).max() < 1e-8
        assert np.abs(gelu_third(x)
                      - (gelu_second(x + h) - gelu_second(x - h)) / (2 * h)).max() < 1e-7


class TestNetworkParams:
    def test_shape_chain_validated(self):
        with pytest.raises(DomainError):
            NetworkParams([np.zeros((3, 2)), np.zeros((4, 5))],
                          [np.zeros(3), np.zeros(4)])

    def test_effective_stats(self):
        net = NetworkParams([np.array([[2.0, 0.0], [1e-9, -0.5]])],
                            [np.array([0.25, 0.0])])
        assert net.b_effective() == 2.0
        assert net.s_effective() == 3  # 2.0, -0.5 and the 0.25 bias

    def test_widths(self, random_net):
        assert random_net.widths == (3, 8, 5, 3)
        assert random_net.depth == 3


class TestForwardAndDerivatives:
    def test_identity_network(self):
        net = identity_net(3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert np.allclose(net_forward(net, x), x)
        assert np.allclose(net_jacobian(net, x),
                           np.broadcast_to(np.eye(3), (5, 3, 3)))
        assert np.allclose(net_divergence(net, x), 3.0)

    def test_jacobian_matches_finite_differences(self, random_net):
        x = np.random.default_rng(1).normal(size=(6, 3))
        jac = net_jacobian(random_net, x)
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (net_forward(random_net, x + e)
                  - net_forward(random_net, x - e)) / (2 * h)
            assert np.abs(jac[:, :, i] - fd).max() < 1e-5

    def test_divergence_matches_finite_differences(self, random_net):
        x = np.random.default_rng(2).normal(size=(6, 3))
        div = net_divergence(random_net, x)
        h = 1e-4
        fd = np.zeros(6)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd += ((net_forward(random_net, x + e)
                    - net_forward(random_net, x - e)) / (2 * h))[:, i]
        assert np.abs(div - fd).max() < 1e-5

    def test_shape_mismatch_rejected(self, random_net):
        with pytest.raises(DomainError):
            net_forward(random_net, np.zeros((2, 4)))


class TestJets:
    def test_consistent_with_value_and_jacobian(self, random_net):
        x = np.random.default_rng(3).normal(size=(4, 3))
        space, jets = net_jets(random_net, x, 2)
        val, jac = net_value_and_jacobian(random_net, x)
        assert np.abs(jets[:, 0, :] - val).max() < 1e-12
        for i in range(3):
            e_i = tuple(1 if j == i else 0 for j in range(3))
            assert np.abs(jet_partial(space, jets, e_i) - jac[:, :, i]).max() < 1e-12

    def test_second_order_vs_finite_differences(self, random_net):
        x = np.random.default_rng(4).normal(size=(3, 3))
        space, jets = net_jets(random_net, x, 2)
        h = 1e-5
        e0 = np.array([h, 0.0, 0.0])
        e1 = np.array([0.0, h, 0.0])
        fd = (net_forward(random_net, x + e0 + e1)
              - net_forward(random_net, x + e0 - e1)
              - net_forward(random_net, x - e0 + e1)
              + net_forward(random_net, x - e0 - e1)) / (4 * h * h)
        assert np.abs(jet_partial(space, jets, (1, 1, 0)) - fd).max() < 1e-4

    def test_third_order_vs_jacobian_of_jets(self, random_net):
        # d^3 f / dx0^2 dx1 via finite differences of the order-2 jet
        x = np.random.default_rng(5).normal(size=(2, 3))
        space3, jets3 = net_jets(random_net, x, 3)
        h = 1e-5
        e1 = np.array([0.0, h, 0.0])
        s2a, ja = net_jets(random_net, x + e1, 2)
        s2b, jb = net_jets(random_net, x - e1, 2)
        fd = (jet_partial(s2a, ja, (2, 0, 0))
              - jet_partial(s2b, jb, (2, 0, 0))) / (2 * h)
        assert np.abs(jet_partial(space3, jets3, (2, 1, 0)) - fd).max() < 1e-3

    def test_order_cap(self, random_net):
        with pytest.raises(DomainError):
            net_jets(random_net, np.zeros((1, 3)), 4)


class TestScoreModel:
    def test_zero_net_unit_gain(self):
        # f == 0 via zero weights; gain pinned near 1 by a large negative raw
        net = NetworkParams([np.zeros((2, 2))], [np.zeros(2)])
        model = ScoreModel("ism", net, a_raw=-40.0, sigma_min=0.5)
        x = np.array([[1.0, 1.0]])
        assert np.allclose(model.score(x), -x)
        assert model.score_divergence(x)[0] == pytest.approx(-2.0)

    def test_ism_linear_reduction(self):
        # one affine layer: s(x) = a((A - I)x - b) elementwise exactly
        A = np.array([[0.5, 0.2], [-0.1, 0.3]])
        b = np.array([0.1, -0.2])
        net = NetworkParams([A], [b])
        model = ScoreModel("ism", net, a_raw=0.7, sigma_min=0.5)
        a = model.a
        x = np.random.default_rng(6).normal(size=(5, 2))
        expect = a * (x @ A.T - b) - a * x
        assert np.allclose(model.score(x), expect, atol=1e-13)
        assert np.allclose(model.score_divergence(x),
                           a * np.trace(A) - a * 2)

    def test_divergence_equals_jacobian_trace(self):
        net = init_params((4, 12, 4), seed=8)
        model = ScoreModel("ism", net, a_raw=0.4, sigma_min=0.3)
        x = np.random.default_rng(7).normal(size=(10, 4))
        div = model.score_divergence(x)
        tr = np.trace(model.score_jacobian(x), axis1=1, axis2=2)
        assert np.abs(div - tr).max() < 1e-10

    def test_dsm_formulas(self):
        net = init_params((2, 6, 2), seed=9)
        model = ScoreModel("dsm", net, sigma_tilde_raw=0.3, t=LN2)
        m_t, sig_sq = 0.5, 0.75
        denom = m_t ** 2 * model.sigma_tilde ** 2 + sig_sq
        x = np.random.default_rng(8).normal(size=(5, 2))
        expect = (m_t * net_forward(net, x) - x) / denom
        assert np.allclose(model.score(x), expect, atol=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(raw=st.floats(-50, 50), sigma_min=st.floats(0.05, 0.95))
    def test_decoded_gain_range(self, raw, sigma_min):
        net = identity_net(2)
        model = ScoreModel("ism", net, a_raw=raw, sigma_min=sigma_min)
        assert 1.0 < model.a <= sigma_min ** -2

    @settings(max_examples=50, deadline=None)
    @given(raw=st.floats(-50, 50))
    def test_decoded_shrinkage_range(self, raw):
        net = identity_net(2)
        model = ScoreModel("dsm", net, sigma_tilde_raw=raw, t=LN2)
        assert 0.0 <= model.sigma_tilde < 1.0

    def test_dsm_needs_time(self):
        with pytest.raises(DomainError):
            ScoreModel("dsm", identity_net(2))


class TestCheckpointRoundTrip:
    @pytest.mark.parametrize("variant", ["ism", "dsm"])
    def test_bit_exact(self, tmp_path, variant):
        net = init_params((3, 7, 3), seed=10)
        if variant == "ism":
            model = ScoreModel("ism", net, a_raw=0.12345678901234567,
                               sigma_min=0.3, monitors={"C0": 1.0})
        else:
            model = ScoreModel("dsm", net, sigma_tilde_raw=-1.5, t=LN2)
        path = tmp_path / "ckpt.json"
        model.save(path)
        back = ScoreModel.load(path)
        assert back.variant == model.variant
        for A, B in zip(model.net.weights, back.net.weights):
            assert np.array_equal(A, B)
        for a, b in zip(model.net.biases, back.net.biases):
            assert np.array_equal(a, b)
        if variant == "ism":
            assert back.a_raw == model.a_raw
            assert back.sigma_min == model.sigma_min
        else:
            assert back.sigma_tilde_raw == model.sigma_tilde_raw
            assert back.t == model.t
        x = np.random.default_rng(11).normal(size=(4, 3))
        assert np.array_equal(model.score(x), back.score(x))


class TestSobolevMonitor:
    def test_zero_network(self):
        net = NetworkParams([np.zeros((2, 2))], [np.zeros(2)])
        model = ScoreModel("ism", net, sigma_min=0.5)
        probe = np.random.default_rng(12).normal(size=(50, 2))
        mon = sobolev_monitor(model, probe, alpha=2)
        assert mon["C0_hat"] == 0.0
        assert mon["C1_hat"] == 0.0
        assert mon["Calpha_hat"] == 0.0
        assert mon["violations"] == {}

    def test_linear_network_monitors(self):
        M = np.array([[0.5, -1.5], [0.25, 0.75]])
        net = NetworkParams([M], [np.zeros(2)])
        model = ScoreModel("ism", net, sigma_min=0.5)
        probe = np.random.default_rng(13).normal(size=(64, 2))
        mon = sobolev_monitor(model, probe, alpha=2)
        assert mon["C1_hat"] == pytest.approx(1.5)
        assert mon["Calpha_hat"] == pytest.approx(0.0, abs=1e-12)

    def test_order2_vs_finite_difference_of_jacobian(self):
        net = init_params((2, 10, 2), seed=14)
        model = ScoreModel("ism", net, sigma_min=0.5)
        rng = np.random.default_rng(15)
        probe = rng.normal(size=(200, 2))
        mon = sobolev_monitor(model, probe, alpha=2)
        h = 1e-4
        acc = np.zeros((len(probe), 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            dj = (net_jacobian(net, probe + e)
                  - net_jacobian(net, probe - e)) / (2 * h)
            # d^2 f_l / dx_i dx_j summed with multi-index multiplicities
            for i in range(2):
                if i == j:
                    acc[:, :] += 0.5 * dj[:, :, i] ** 2
                else:
                    acc[:, :] += 0.5 * dj[:, :, i] ** 2
        fd_est = float(np.sqrt(acc.mean(axis=0).max()))
        assert mon["Calpha_hat"] == pytest.approx(fd_est, rel=0.05)

    def test_violation_flags(self):
        M = np.array([[5.0, 0.0], [0.0, 5.0]])
        net = NetworkParams([M], [np.array([10.0, -10.0])])
        model = ScoreModel("ism", net, sigma_min=0.5,
                           monitors={"C0": 1.0, "C1": 0.1, "C_alpha": 1.0})
        probe = np.random.default_rng(16).normal(size=(32, 2))
        mon = sobolev_monitor(model, probe, alpha=2)
        assert mon["violations"]["C0"]
        assert mon["violations"]["C1"]
        assert not mon["violations"]["C_alpha"]

    def test_alpha_cap(self):
        model = ScoreModel("ism", identity_net(2), sigma_min=0.5)
        with pytest.raises(DomainError):
            sobolev_monitor(model, np.zeros((4, 2)), alpha=4)


class TestPerturbationAudit:
    def test_zero_epsilon_zero_gap(self):
        net = init_params((2, 6, 2), seed=17)
        res = perturbation_stability_audit(net, 0.0, R=2.0, trials=3, seed=1)
        assert res["value_gap"] == 0.0
        assert res["div_gap"] == 0.0
        assert res["holds"]

    def test_identity_single_layer_large_slack(self):
        net = identity_net(2)
        res = perturbation_stability_audit(net, 1e-3, R=1.0, trials=5, seed=2)
        assert res["holds"]
        assert res["value_gap"] < 0.25 * res["value_bound"]

    @pytest.mark.parametrize("arch", [(2, 5, 2), (3, 6, 4, 3), (2, 4, 4, 4, 2)])
    def test_random_nets_never_violate(self, arch):
        for seed in range(17):
            net = init_params(arch, seed=seed)
            res = perturbation_stability_audit(net, 0.05, R=1.5, trials=3,
                                               seed=seed)
            assert res["holds"], (arch, seed)


class TestAffineScore:
    def test_matches_formulas(self):
        M = np.array([[0.0, 1.0], [-1.0, 0.0]])
        c = np.array([0.5, -0.5])
        sc = AffineScore(c, M)
        x = np.random.default_rng(18).normal(size=(6, 2))
        assert np.allclose(sc.score(x), c + x @ M.T)
        assert np.allclose(sc.score_divergence(x), 0.0)
        assert np.allclose(sc.score_jacobian(x)[0], M)
