"""OTA link: design construction, truncation indicator, round aggregation."""

import math

import numpy as np
import pytest

from otafl import bounds, channel, link, rng
from otafl.channel import NetworkConfig


def toy_net(lam, d=100, e_s=1.0, n0=0.0, g_max=10.0):
    return NetworkConfig(lam=np.asarray(lam, dtype=float), e_s=e_s, n0=n0, d=d, g_max=g_max)


class TestMakeDesign:
    def test_symmetric_pair(self):
        net = toy_net([1.0, 1.0])
        design = link.make_design([0.4, 0.4], net)
        assert design.p == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_single_device(self):
        net = toy_net([2.0])
        design = link.make_design([0.3], net)
        assert design.p[0] == 1.0
        assert design.alpha == design.alpha_m[0]

    def test_against_scalar_closed_form(self):
        # independent scalar evaluation of the two alpha_m expressions
        net = toy_net([1.0, 1.0])
        g_lim = channel.gamma_max(1.0, 10.0, 100, 1.0)
        gamma = np.array([g_lim, 0.1 * g_lim])
        design = link.make_design(gamma, net)
        expected = [g * math.exp(-(g ** 2) * 100.0 / (100 * 1.0 * 1.0)) for g in gamma]
        assert design.alpha_m == pytest.approx(expected, rel=1e-14)
        alpha = sum(expected)
        assert design.alpha == pytest.approx(alpha, rel=1e-14)
        assert design.p == pytest.approx([e / alpha for e in expected], rel=1e-14)

    def test_nonpositive_prescaler_rejected(self):
        net = toy_net([1.0, 1.0])
        with pytest.raises(ValueError):
            link.make_design([0.5, 0.0], net)

    def test_simplex_and_consistency_invariants(self):
        gen = np.random.default_rng(4)
        for _ in range(20):
            lam = gen.uniform(0.01, 5.0, size=5)
            net = toy_net(lam)
            g_lim = channel.gamma_max(lam, net.g_max, net.d, net.e_s)
            design = link.make_design(gen.uniform(0.05, 1.0, size=5) * g_lim, net)
            assert abs(design.p.sum() - 1.0) <= 1e-12
            recomputed = channel.alpha_m(design.gamma, lam, net.g_max, net.d, net.e_s)
            assert np.max(np.abs(recomputed - design.alpha_m)) <= 1e-12

    def test_equal_gains_equal_prescalers_is_zero_bias(self):
        net = toy_net([0.7] * 8)
        design = link.make_design([0.2] * 8, net)
        assert np.all(design.p == design.p[0])
        assert design.p[0] == pytest.approx(1 / 8, abs=1e-16)


class TestTransmitIndicator:
    def test_boundary_is_inclusive(self):
        net = toy_net([1.0])
        gamma = 0.5
        thresh = net.g_max * gamma / math.sqrt(net.d * net.e_s)
        assert link.transmit_indicator(thresh + 0j, gamma, net) == 1
        assert link.transmit_indicator((thresh - 1e-12) + 0j, gamma, net) == 0

    def test_zero_prescaler_always_on(self):
        net = toy_net([1.0])
        assert link.transmit_indicator(0j, 0.0, net) == 1

    def test_zero_channel_positive_prescaler_off(self):
        net = toy_net([1.0])
        assert link.transmit_indicator(0j, 0.5, net) == 0

    def test_energy_budget_at_boundary(self):
        # an active device at the exact threshold uses exactly e_s per sample
        net = toy_net([1.0], d=64, e_s=2.0, g_max=5.0)
        gamma = 0.3
        thresh = net.g_max * gamma / math.sqrt(net.d * net.e_s)
        g = np.full(net.d, net.g_max / math.sqrt(net.d))  # norm exactly g_max
        x = gamma * g / thresh  # channel-inverted transmit signal at |h| = threshold
        assert float(x @ x) / net.d == pytest.approx(net.e_s, rel=1e-12)
        # any stronger channel only reduces the transmit energy
        x_strong = gamma * g / (2 * thresh)
        assert float(x_strong @ x_strong) / net.d < net.e_s


class TestOtaRound:
    def setup_method(self):
        self.net = toy_net([1.0, 0.5, 0.1], d=8)
        self.design = link.make_design([0.3, 0.2, 0.1], self.net)
        gen = np.random.default_rng(11)
        grads = gen.standard_normal((3, 8))
        self.grads = grads / np.linalg.norm(grads, axis=1, keepdims=True) * 3.0

    def test_all_active_no_noise(self):
        fading = channel.FadingDraw(h=np.full(3, 100.0 + 0j), round_index=0)
        result = link.ota_round(self.grads, self.design, fading, np.zeros(8), self.net)
        expected = (self.design.gamma @ self.grads) / self.design.alpha
        assert result.g_hat == pytest.approx(expected, rel=1e-14)
        assert list(result.active_mask) == [1, 1, 1]

    def test_all_silent_no_noise(self):
        fading = channel.FadingDraw(h=np.zeros(3, dtype=complex), round_index=0)
        result = link.ota_round(self.grads, self.design, fading, np.zeros(8), self.net)
        assert np.all(result.g_hat == 0.0)
        assert list(result.active_mask) == [0, 0, 0]

    def test_exact_decomposition(self):
        fading = channel.FadingDraw(h=np.array([1.0, 0.001, 2.0], dtype=complex), round_index=0)
        noise = np.random.default_rng(2).standard_normal(8)
        result = link.ota_round(self.grads, self.design, fading, noise, self.net)
        assert np.array_equal(result.g_hat, result.signal_part + result.noise_part)

    def test_norm_contract_violation_reported(self):
        bad = self.grads.copy()
        bad[1] *= 100.0
        fading = channel.FadingDraw(h=np.ones(3, dtype=complex), round_index=0)
        with pytest.raises(ValueError, match="device 1"):
            link.ota_round(bad, self.design, fading, np.zeros(8), self.net)

    def test_unbiasedness_monte_carlo(self):
        # expected estimate is the p-weighted gradient combination
        net = toy_net([1.0, 0.4, 0.1], d=6, n0=0.01)
        design = link.make_design([0.5, 0.3, 0.2], net)
        gen = np.random.default_rng(8)
        grads = gen.standard_normal((3, 6))
        grads = grads / np.linalg.norm(grads, axis=1, keepdims=True) * 5.0
        n = 10 ** 5
        expected = design.p @ grads

        gen_mc = rng.stream(21, purpose=rng.NOISE)
        h = channel.fading_matrix(net.lam, n, gen_mc)
        thresh = net.g_max * design.gamma / math.sqrt(net.d * net.e_s)
        chi = (np.abs(h) >= thresh).astype(float)
        est = (chi * design.gamma) @ grads / design.alpha
        est += math.sqrt(net.n0) * gen_mc.standard_normal((n, 6)) / design.alpha
        se = est.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(est.mean(axis=0) - expected) <= 3 * se)


class TestEmpiricalMoments:
    def test_single_trial_variance_zero(self):
        net = toy_net([1.0, 1.0], d=4)
        design = link.make_design([0.2, 0.2], net)
        grads = np.ones((2, 4))
        _, var = link.empirical_moments(design, net, grads, n_trials=1)
        assert var == 0.0

    def test_deterministic_channel_limit(self):
        # enormous gains make truncation exact and noiseless rounds constant
        net = toy_net([1e300, 1e300], d=4, n0=0.0)
        design = link.make_design([0.2, 0.3], net)
        grads = np.ones((2, 4))
        mean, var = link.empirical_moments(design, net, grads, n_trials=200)
        assert var == pytest.approx(0.0, abs=1e-30)
        assert mean == pytest.approx((design.gamma.sum()) * np.ones(4) / design.alpha)

    def test_variance_below_zeta(self):
        net = toy_net([1.0, 0.2], d=10, n0=0.05)
        design = link.make_design([0.5, 0.2], net)
        gen = np.random.default_rng(3)
        grads = gen.standard_normal((2, 10))
        grads = grads / np.linalg.norm(grads, axis=1, keepdims=True) * net.g_max
        _, var = link.empirical_moments(design, net, grads, n_trials=10 ** 5, seed=5)
        zeta = bounds.zeta_report(design, 0.0, net).zeta
        assert var <= zeta * 1.02

    def test_needs_a_trial(self):
        net = toy_net([1.0], d=4)
        design = link.make_design([0.2], net)
        with pytest.raises(ValueError):
            link.empirical_moments(design, net, np.ones((1, 4)), n_trials=0)
