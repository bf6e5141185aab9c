import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import multivariate_normal, norm

from mars.envs import Dataset, MeasurementDistribution
from mars.fsvgd import (
    AnalyticGaussianProcessScore,
    BnnArchitecture,
    InferenceConfig,
    ParticleEnsemble,
    PredictiveMixture,
    SSGEPriorScore,
    ZeroPriorScore,
    _measurement_vector,
    fsvgd_step,
    init_particle,
    init_particles,
    jacobian_transpose_product,
    likelihood_score,
    nn_forward,
    predictive,
    run_inference,
    steinwart_bias_init,
    svgd_direction,
    svgd_kernel,
)
from mars.interpolate import gp_fit, matern52_gram

ARCH = BnnArchitecture(1, (4, 4))  # 33 parameters
NU = MeasurementDistribution([-2.0], [2.0])


def _numpy_forward(theta, arch, X):
    h, pos = X, 0
    sizes = arch.layer_sizes
    for j, (i, o) in enumerate(sizes):
        W = theta[pos:pos + i * o].reshape(i, o)
        pos += i * o
        b = theta[pos:pos + o]
        pos += o
        h = h @ W + b
        if j < len(sizes) - 1:
            h = np.where(h > 0, h, 0.01 * h)
    return h[:, 0]


class TestNetwork:
    def test_param_count(self):
        assert ARCH.num_params == 33
        assert BnnArchitecture(1).num_params == 1 * 32 + 32 + 2 * (32 * 32 + 32) + 33

    def test_forward_matches_numpy(self):
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(ARCH.num_params)
        X = rng.uniform(-2, 2, size=(7, 1))
        np.testing.assert_allclose(nn_forward(theta, ARCH, X), _numpy_forward(theta, ARCH, X), atol=1e-12)

    def test_batched_forward(self):
        rng = np.random.default_rng(1)
        thetas = rng.standard_normal((3, ARCH.num_params))
        X = rng.uniform(-2, 2, size=(5, 1))
        out = nn_forward(thetas, ARCH, X)
        for l in range(3):
            np.testing.assert_allclose(out[l], _numpy_forward(thetas[l], ARCH, X), atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_jacobian_transpose_product(self, seed):
        rng = np.random.default_rng(seed)
        theta = rng.standard_normal(ARCH.num_params)
        X = rng.uniform(-2, 2, size=(4, 1))
        v = rng.standard_normal(4)
        got = jacobian_transpose_product(theta, ARCH, X, v)
        eps = 1e-6
        fd = np.array([
            (v @ _numpy_forward(theta + eps * e, ARCH, X) - v @ _numpy_forward(theta - eps * e, ARCH, X)) / (2 * eps)
            for e in np.eye(ARCH.num_params)
        ])
        assert np.linalg.norm(got - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


class TestInitialization:
    @given(st.integers(1, 5), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_steinwart_kink_inside_domain(self, fan_in, seed):
        rng = np.random.default_rng(seed)
        w, b = steinwart_bias_init(fan_in, -1.0, 1.0, rng)
        assert np.linalg.norm(w) == pytest.approx(1.0)
        assert np.all(w >= 0)
        # the kink w.x + b = 0 passes through a point of the domain cube
        assert abs(b) <= np.sum(np.abs(w)) + 1e-12

    def test_invalid_fan_in(self):
        with pytest.raises(ValueError):
            steinwart_bias_init(0, -1, 1, np.random.default_rng(0))

    def test_he_bounds(self):
        rng = np.random.default_rng(0)
        arch = BnnArchitecture(2, (8, 8))
        theta = init_particle(arch, MeasurementDistribution([-1.0, -1.0], [1.0, 1.0]), rng)
        pos = 0
        for j, (i, o) in enumerate(arch.layer_sizes):
            W = theta[pos:pos + i * o]
            pos += i * o
            b = theta[pos:pos + o]
            pos += o
            assert np.all(np.abs(W) <= math.sqrt(6 / i) + 1e-12)
            if j == len(arch.layer_sizes) - 1:
                assert np.all(b == 0)

    def test_first_layer_kinks_in_domain(self):
        rng = np.random.default_rng(3)
        arch = BnnArchitecture(1, (16,))
        nu = MeasurementDistribution([2.0], [5.0])
        theta = init_particle(arch, nu, rng)
        W, b = theta[:16], theta[16:32]
        kinks = -b / W
        assert np.all((kinks >= 2.0 - 1e-9) & (kinks <= 5.0 + 1e-9))

    def test_deterministic(self):
        a = init_particles(ARCH, 3, NU, np.random.default_rng(5))
        b = init_particles(ARCH, 3, NU, np.random.default_rng(5))
        np.testing.assert_array_equal(a.theta, b.theta)
        with pytest.raises(ValueError):
            init_particles(ARCH, 0, NU, np.random.default_rng(5))


class TestScores:
    def test_likelihood_score(self):
        g = likelihood_score(np.array([1.0, 2.0]), np.array([[0.5, 2.5]]), 0.5)
        np.testing.assert_allclose(g, [[2.0, -2.0]])
        full = likelihood_score(np.array([1.0]), np.array([[0.0]]), 1.0, num_total=3, scale=2.0)
        np.testing.assert_array_equal(full, [[0.0, 0.0, 2.0]])
        with pytest.raises(ValueError):
            likelihood_score([0.0], [[0.0]], 0.0)

    def test_gp_prior_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-2, 2, size=(4, 1))
        H = rng.standard_normal((2, 4))
        prior = AnalyticGaussianProcessScore(0.7, 1.3)
        got = prior(X, H, rng)
        K = matern52_gram(X, X, 0.7, 1.3) + prior.jitter * np.eye(4)
        logp = multivariate_normal(np.zeros(4), K).logpdf
        eps = 1e-6
        for l in range(2):
            fd = [(logp(H[l] + eps * e) - logp(H[l] - eps * e)) / (2 * eps) for e in np.eye(4)]
            np.testing.assert_allclose(got[l], fd, rtol=1e-5, atol=1e-6)

    def test_gp_prior_mean_function(self):
        prior = AnalyticGaussianProcessScore(1.0, mean_fn=lambda X: 3.0 * np.ones(len(X)))
        got = prior(np.array([[0.0], [1.0]]), np.full((1, 2), 3.0), None)
        np.testing.assert_allclose(got, 0.0, atol=1e-12)

    def test_zero_prior(self):
        np.testing.assert_array_equal(ZeroPriorScore()(None, np.ones((2, 3)), None), np.zeros((2, 3)))

    def test_ssge_prior_shape(self):
        rng = np.random.default_rng(0)
        gps = [gp_fit((rng.uniform(-1, 1, size=(4, 1)), rng.standard_normal(4)), 1.0) for _ in range(10)]
        out = SSGEPriorScore(gps, samples_per_task=2)(np.linspace(-1, 1, 3)[:, None], rng.standard_normal((5, 3)), rng)
        assert out.shape == (5, 3) and np.all(np.isfinite(out))


class TestSvgd:
    def test_kernel_gradient(self):
        rng = np.random.default_rng(0)
        H = rng.standard_normal((3, 4))
        K, gK = svgd_kernel(H, 0.8)
        eps = 1e-6
        for i in range(3):
            for l in range(3):
                for d in range(4):
                    Hp, Hm = H.copy(), H.copy()
                    Hp[i, d] += eps
                    Hm[i, d] -= eps
                    kp = np.exp(-np.sum((Hp[i] - H[l]) ** 2) / 1.6)
                    km = np.exp(-np.sum((Hm[i] - H[l]) ** 2) / 1.6)
                    if i == l:
                        continue  # self-pairs have zero gradient analytically
                    assert gK[i, l, d] == pytest.approx((kp - km) / (2 * eps), abs=1e-8)
        np.testing.assert_allclose(np.diag(K), 1.0)
        assert np.all(gK[np.arange(3), np.arange(3)] == 0)

    def test_direction_brute_force(self):
        rng = np.random.default_rng(1)
        H = rng.standard_normal((4, 3))
        S = rng.standard_normal((4, 3))
        bw = 1.7
        phi = svgd_direction(H, S, bw)
        for l in range(4):
            acc = np.zeros(3)
            for i in range(4):
                k = math.exp(-np.sum((H[i] - H[l]) ** 2) / (2 * bw))
                acc += k * S[i] - (H[i] - H[l]) / bw * k
            np.testing.assert_allclose(phi[l], acc / 4, atol=1e-12)

    def test_bandwidth_must_be_positive(self):
        with pytest.raises(ValueError):
            svgd_kernel(np.zeros((2, 2)), 0.0)

    def test_single_particle_is_projected_score_step(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.uniform(-2, 2, size=(6, 1)), rng.standard_normal(6))
        cfg = InferenceConfig(step_size=1e-2, num_particles=1, measurement_size=3)
        ens = init_particles(ARCH, 1, NU, rng)
        prior = AnalyticGaussianProcessScore(1.0)
        got = fsvgd_step(ens, data, prior, NU, cfg, np.random.default_rng(7))
        # manual: theta + gamma * J^T (likelihood score + prior score), no kernel terms
        r = np.random.default_rng(7)
        X, idx = _measurement_vector(data, NU, cfg, r)
        h = nn_forward(ens.theta[0], ARCH, X)
        score = likelihood_score(data.targets[idx], h[None, -len(idx):], cfg.likelihood_std, len(X))[0]
        score = score + prior(X, h[None], r)[0]
        expected = ens.theta[0] + cfg.step_size * jacobian_transpose_product(ens.theta[0], ARCH, X, score)
        np.testing.assert_allclose(got.theta[0], expected, rtol=1e-12, atol=1e-14)

    def test_zero_step_keeps_particles(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.uniform(-2, 2, size=(4, 1)), rng.standard_normal(4))
        ens = init_particles(ARCH, 3, NU, rng)
        out = fsvgd_step(ens, data, ZeroPriorScore(), NU, InferenceConfig(step_size=0.0), rng)
        np.testing.assert_array_equal(out.theta, ens.theta)

    def test_minibatch_cap(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.uniform(-2, 2, size=(40, 1)), rng.standard_normal(40))
        X, idx = _measurement_vector(data, NU, InferenceConfig(measurement_size=5, batch_cap=16), rng)
        assert X.shape == (21, 1) and len(idx) == 16 and len(set(idx)) == 16

    def test_inference_fits_data_and_is_deterministic(self):
        rng = np.random.default_rng(0)
        x = np.linspace(-2, 2, 8)[:, None]
        data = Dataset(x, np.sin(x[:, 0]))
        cfg = InferenceConfig(step_size=3e-4, steps=400, num_particles=4)
        a = run_inference(data, ZeroPriorScore(), BnnArchitecture(1, (16, 16)), cfg, np.random.default_rng(1), NU)
        b = run_inference(data, ZeroPriorScore(), BnnArchitecture(1, (16, 16)), cfg, np.random.default_rng(1), NU)
        np.testing.assert_array_equal(a.theta, b.theta)
        init = init_particles(BnnArchitecture(1, (16, 16)), 4, NU, np.random.default_rng(1))
        err0 = np.mean((predictive(init, 0.1, x).mean - data.targets) ** 2)
        err = np.mean((predictive(a, 0.1, x).mean - data.targets) ** 2)
        assert err < 0.5 * err0

    def test_divergence_raises(self):
        x = np.linspace(-2, 2, 8)[:, None]
        data = Dataset(x, 1e3 * np.sin(x[:, 0]))
        cfg = InferenceConfig(step_size=1e3, steps=50, num_particles=2)
        with np.errstate(all="ignore"), pytest.raises(ArithmeticError, match="diverged"):
            run_inference(data, ZeroPriorScore(), ARCH, cfg, np.random.default_rng(0), NU)


class TestPredictive:
    def test_single_component_median(self):
        mix = PredictiveMixture(np.array([[1.5]]), 0.3)
        assert mix.cdf(np.array([1.5]))[0] == pytest.approx(0.5)

    def test_limits_and_monotone(self):
        mix = PredictiveMixture(np.array([[0.0], [2.0]]), 0.5)
        assert mix.cdf(np.array([-1e6]))[0] == 0.0
        assert mix.cdf(np.array([1e6]))[0] == 1.0
        ys = np.linspace(-5, 7, 200)
        vals = [mix.cdf(np.array([y]))[0] for y in ys]
        assert np.all(np.diff(vals) >= 0)

    def test_two_components_quadrature(self):
        means, sigma = np.array([[-0.4], [1.1]]), 0.7
        mix = PredictiveMixture(means, sigma)
        dens = lambda t: 0.5 * (norm.pdf(t, -0.4, sigma) + norm.pdf(t, 1.1, sigma))  # noqa: E731
        for y in (-1.0, 0.2, 2.5):
            assert mix.cdf(np.array([y]))[0] == pytest.approx(quad(dens, -np.inf, y)[0], abs=1e-6)

    def test_moments(self):
        mix = PredictiveMixture(np.array([[0.0, 1.0], [2.0, 1.0]]), 0.5)
        np.testing.assert_allclose(mix.mean, [1.0, 1.0])
        np.testing.assert_allclose(mix.std, [math.sqrt(1.25), 0.5])


class TestEnsembleDocuments:
    def test_roundtrip(self):
        ens = init_particles(ARCH, 3, NU, np.random.default_rng(0))
        docs = ens.particle_documents()
        assert [d["index"] for d in docs] == [0, 1, 2]
        back = ParticleEnsemble.from_documents(ARCH, list(reversed(docs)))
        np.testing.assert_array_equal(back.theta, ens.theta)

    def test_wrong_size(self):
        with pytest.raises(ValueError):
            ParticleEnsemble(ARCH, np.zeros((2, 5)))
