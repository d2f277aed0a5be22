import math

import numpy as np
import pytest

from denseflow import tensor as T
from denseflow.cross_unit import SIGMA_FLOOR, CrossUnitCoupling, strip
from denseflow.errors import ShapeError
from denseflow.evaluation import log_mean_exp
from denseflow.tensor import Tensor

from helpers import scalar_gaussian_logpdf

LOG_2PI = math.log(2.0 * math.pi)


class ZeroNoiseRng:
    """rng double drawing all-zero noise."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def constant_conditioner(mu, sigma):
    def fn(ctx):
        b, _, h, w = ctx.shape
        return (
            Tensor(np.full((b, 1, h, w), mu)),
            Tensor(np.full((b, 1, h, w), sigma)),
        )

    return fn


def toy_bound_samples(z_value, mu, sigma, n_samples, rng):
    """Identity flow above one augmentation, N(0, I) termination over
    (z, noise): per-draw bound values for a scalar z."""
    coupling = CrossUnitCoupling(k=1, context_channels=1,
                                 conditioner=constant_conditioner(mu, sigma))
    z = Tensor(np.full((n_samples, 1, 1, 1), z_value))
    z_aug, logdet, noise = coupling.augment(z, [z], rng)
    prior = -0.5 * (z_aug.data.reshape(n_samples, -1) ** 2).sum(axis=1) - LOG_2PI
    return prior + logdet.data + noise


class TestAugment:
    def test_standard_normal_stub_at_zero_draw(self):
        k, h, w = 2, 3, 3
        coupling = CrossUnitCoupling(k=k, context_channels=4,
                                     conditioner=constant_conditioner(0.0, 1.0))
        # widen the stub to k channels
        coupling.custom_conditioner = lambda ctx: (
            Tensor(np.zeros((ctx.shape[0], k, h, w))),
            Tensor(np.ones((ctx.shape[0], k, h, w))),
        )
        z = Tensor(np.zeros((2, 4, h, w)))
        _, logdet, noise = coupling.augment(z, [], ZeroNoiseRng())
        assert np.allclose(logdet.data, 0.0)  # ln sigma = 0
        assert np.allclose(noise, 0.5 * k * h * w * LOG_2PI)

    def test_growth_rate_channel_arithmetic(self):
        rng = np.random.default_rng(0)
        coupling = CrossUnitCoupling(k=10, context_channels=12, rng=rng)
        z = Tensor(rng.standard_normal((2, 12, 8, 8)).astype(np.float32))
        z_aug, _, _ = coupling.augment(z, [], np.random.default_rng(1))
        assert z_aug.shape == (2, 22, 8, 8)

    def test_terms_recomputable_from_logged_values(self):
        rng = np.random.default_rng(2)
        coupling = CrossUnitCoupling(k=3, context_channels=5, rng=rng)
        for _, p in coupling.named_parameters():
            p.data = p.data + 0.3 * rng.standard_normal(p.data.shape).astype(np.float32)
        z = Tensor(rng.standard_normal((4, 5, 4, 4)).astype(np.float32))
        draw_seed = 77
        z_aug, logdet, noise = coupling.augment(
            z, [], np.random.default_rng(draw_seed)
        )
        # replay the same draw, read (mu, sigma) from the conditioner
        e = np.random.default_rng(draw_seed).standard_normal((4, 3, 4, 4)).astype(np.float32)
        with T.no_grad():
            mu, sigma = coupling._mu_sigma(z)
        assert np.allclose(
            noise, 0.5 * (e**2).sum(axis=(1, 2, 3)) + 0.5 * 3 * 16 * LOG_2PI
        )
        assert np.allclose(
            logdet.data, np.log(sigma.data).sum(axis=(1, 2, 3)), atol=1e-5
        )
        assert np.allclose(z_aug.data[:, 5:], sigma.data * e + mu.data, atol=1e-6)

    def test_sigma_floor_positive(self):
        rng = np.random.default_rng(3)
        coupling = CrossUnitCoupling(k=2, context_channels=3, rng=rng)
        for _, p in coupling.named_parameters():
            p.data = p.data - 10.0  # drive softplus toward zero
        z = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        with T.no_grad():
            _, sigma = coupling._mu_sigma(z)
        assert sigma.data.min() >= SIGMA_FLOOR * 0.999

    def test_spatial_mismatch_rejected(self):
        coupling = CrossUnitCoupling(k=1, context_channels=2,
                                     conditioner=constant_conditioner(0.0, 1.0))
        z = Tensor(np.zeros((2, 2, 4, 4)))
        bad = Tensor(np.zeros((2, 2, 8, 8)))
        with pytest.raises(ShapeError, match="spatial"):
            coupling.augment(z, [bad], np.random.default_rng(0))

    def test_white_noise_mode_skips_conditioner(self):
        coupling = CrossUnitCoupling(k=2, context_channels=3, preconditioned=False)
        z = Tensor(np.zeros((2, 3, 4, 4)))
        z_aug, logdet, _ = coupling.augment(z, [z], np.random.default_rng(4))
        assert coupling.conditioner_calls == 0
        assert np.allclose(logdet.data, 0.0)
        assert z_aug.shape == (2, 5, 4, 4)


class TestStrip:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(5)
        coupling = CrossUnitCoupling(k=4, context_channels=6, rng=rng)
        z = Tensor(rng.standard_normal((3, 6, 4, 4)).astype(np.float32))
        z_aug, _, _ = coupling.augment(z, [], np.random.default_rng(6))
        assert (strip(z_aug.data, 4) == z.data).all()

    def test_k_zero_identity(self):
        x = np.ones((2, 3, 2, 2))
        assert strip(x, 0) is x

    def test_channel_arithmetic(self):
        x = np.zeros((1, 22, 2, 2))
        assert strip(x, 10).shape == (1, 12, 2, 2)

    def test_stripping_never_calls_conditioner(self):
        rng = np.random.default_rng(7)
        coupling = CrossUnitCoupling(k=2, context_channels=3, rng=rng)
        before = coupling.conditioner_calls
        coupling.strip(np.zeros((2, 5, 4, 4)))
        assert coupling.conditioner_calls == before

    def test_strip_too_many_channels(self):
        with pytest.raises(ShapeError):
            strip(np.zeros((1, 3, 2, 2)), 4)


class TestBoundToy:
    def test_exact_when_noise_matches_prior(self):
        # mu=0, sigma=1: the importance weight is constant, the bound exact
        rng = np.random.default_rng(8)
        z_value = 0.9
        samples = toy_bound_samples(z_value, 0.0, 1.0, 512, rng)
        exact = scalar_gaussian_logpdf(z_value)
        assert np.abs(samples - exact).max() < 1e-10

    def test_lme_estimator_matches_analytic_marginal(self):
        # sigma > 1/sqrt(2) keeps the importance weights at finite variance
        rng = np.random.default_rng(9)
        z_value = 0.4
        exact = scalar_gaussian_logpdf(z_value)
        samples = toy_bound_samples(z_value, 0.3, 0.85, 10_000, rng)
        est = float(log_mean_exp(samples, axis=0))
        w = np.exp(samples - samples.max())
        se = float(w.std() / (w.mean() * math.sqrt(w.size)))
        assert abs(est - exact) <= 3 * se

    def test_single_sample_bound_below_marginal(self):
        rng = np.random.default_rng(10)
        z_value = 0.4
        exact = scalar_gaussian_logpdf(z_value)
        samples = toy_bound_samples(z_value, 0.3, 0.7, 20_000, rng)
        mean = samples.mean()
        se = samples.std(ddof=1) / math.sqrt(samples.size)
        assert mean < exact - 3 * se  # strictly below for mismatched (mu, sigma)

    def test_k_sample_estimator_nondecreasing(self):
        # mean over 200 trials with common random numbers:
        # 10-sample LME >= 1-sample bound
        rng = np.random.default_rng(11)
        z_value = 0.6
        one, ten = [], []
        for _ in range(200):
            s = toy_bound_samples(z_value, 0.4, 0.85, 10, rng)
            one.append(s[0])
            ten.append(float(log_mean_exp(s, axis=0)))
        assert np.mean(ten) >= np.mean(one)
