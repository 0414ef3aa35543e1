import math

import numpy as np
import pytest

from simpa.autodiff import Tensor, gradients
from simpa.kl_estimation import (
    SMOOTHING_LOW,
    adapt_discriminator,
    discriminator_loss,
    discriminator_objective,
    estimate_kl,
    fit_discriminator,
    smoothed_labels,
)
from simpa.networks import Architecture, MlpSpec, discriminate, generate_weights, param_blocks
from simpa.stochastic import RngStream


def tiny_arch():
    return Architecture.build(1, 1, 3, (4,), (6,), (8,), (4,))


def test_zero_discriminator_gives_two_log_half():
    arch = tiny_arch()
    rng = np.random.default_rng(0)
    theta = rng.normal(size=arch.generator.n_params)
    lam = rng.normal(size=arch.generator.n_params)
    val = discriminator_loss(arch, np.zeros(arch.discriminator.n_params), theta, lam, rng.random((16, 3)))
    assert val == pytest.approx(2 * math.log(0.5), abs=1e-12)
    assert val == pytest.approx(-1.3863, abs=1e-4)


def test_perfect_discrimination_limit():
    # V = +big on the prior row and -big on the posterior row
    spec = MlpSpec((1, 1))
    blocks = param_blocks(spec, np.array([50.0, 0.0]), False)
    val = discriminator_objective(spec, blocks, np.array([[1.0]]), np.array([[-1.0]])).item()
    assert abs(val) < 1e-20


def test_objective_is_finite_for_huge_logits():
    spec = MlpSpec((1, 1))
    blocks = param_blocks(spec, np.array([1e4, 0.0]), False)
    val = discriminator_objective(spec, blocks, np.array([[-1.0]]), np.array([[1.0]])).item()
    assert np.isfinite(val) and val == pytest.approx(-2e4)


def test_smoothed_labels_range():
    r = smoothed_labels(10_000, RngStream(0))
    assert r.min() >= SMOOTHING_LOW and r.max() <= 1.0
    assert abs(r.mean() - 0.975) < 0.002


def test_smoothed_objective_matches_hand_formula():
    spec = MlpSpec((2, 1))
    rng = np.random.default_rng(1)
    omega = rng.normal(size=spec.n_params)
    wp, wq = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    r = smoothed_labels(5, RngStream(3))
    val = discriminator_objective(spec, param_blocks(spec, omega, False), wp, wq, r).item()
    Vp, Vq = wp @ omega[:2] + omega[2], wq @ omega[:2] + omega[2]
    ls = lambda v: -np.logaddexp(0, -v)
    expect = np.mean(r * ls(Vp) + (1 - r) * ls(-Vp)) + np.mean((1 - r) * ls(Vq) + r * ls(-Vq))
    assert val == pytest.approx(expect, abs=1e-13)


def test_zero_ascent_steps_is_identity():
    arch = tiny_arch()
    rng = np.random.default_rng(2)
    omega0 = rng.normal(size=arch.discriminator.n_params)
    th = rng.normal(size=arch.generator.n_params)
    out = adapt_discriminator(arch, omega0, th, th, lambda s, n: rng.random((n, 3)), 0, 8, 0.1)
    assert np.array_equal(out, omega0) and out is not omega0


def test_identical_generators_keep_discriminator_near_half():
    arch = tiny_arch()
    rng = np.random.default_rng(3)
    th = rng.normal(size=arch.generator.n_params) * 0.5
    omega = adapt_discriminator(
        arch, arch.discriminator.init(rng), th, th, lambda s, n: rng.random((n, 3)), 50, 64, 0.05,
        label_rng=lambda s: RngStream(4, s),
    )
    w = generate_weights(arch.generator, param_blocks(arch.generator, th, False), rng.random((1000, 3)))
    _, D = discriminate(arch.discriminator, param_blocks(arch.discriminator, omega, False), w)
    assert 0.4 <= D.data.mean() <= 0.6


def test_separated_proxies_are_classified():
    # "generators" emitting N(0,1) and N(3,1): a 1x1 linear generator fed
    # standard-normal latents, with bias 0 or 3
    arch = Architecture.build(1, 1, 1, (1,), (), (8,), (2,), generator_output="identity")
    assert arch.generator.layer_widths == (1, arch.base.n_params)
    P = arch.base.n_params
    theta = np.concatenate([np.eye(1, P).ravel(), np.zeros(P)])
    lam = np.concatenate([np.eye(1, P).ravel(), np.eye(1, P).ravel() * 3.0])
    rng = np.random.default_rng(5)
    omega = adapt_discriminator(arch, arch.discriminator.init(rng), theta, lam, lambda s, n: rng.normal(size=(n, 1)), 300, 256, 0.1)
    z = rng.normal(size=(2000, 1))
    wp = generate_weights(arch.generator, param_blocks(arch.generator, theta, False), z)
    wq = generate_weights(arch.generator, param_blocks(arch.generator, lam, False), z)
    blocks = param_blocks(arch.discriminator, omega, False)
    acc = 0.5 * (np.mean(discriminate(arch.discriminator, blocks, wp)[1].data > 0.5) + np.mean(discriminate(arch.discriminator, blocks, wq)[1].data < 0.5))
    assert acc > 0.9


def test_estimate_zero_discriminator_is_zero():
    spec = MlpSpec((3, 4, 1))
    val = estimate_kl(spec, param_blocks(spec, np.zeros(spec.n_params), False), np.random.default_rng(0).normal(size=(10, 3)))
    assert val.item() == 0.0


def test_estimate_invariant_to_batch_duplication():
    spec = MlpSpec((3, 4, 1))
    rng = np.random.default_rng(6)
    blocks = param_blocks(spec, rng.normal(size=spec.n_params), False)
    w = rng.normal(size=(7, 3))
    a = estimate_kl(spec, blocks, w).item()
    b = estimate_kl(spec, blocks, np.concatenate([w, w])).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_estimate_gradient_wrt_generator_matches_fd():
    arch = tiny_arch()
    rng = np.random.default_rng(7)
    lam = rng.normal(size=arch.generator.n_params) * 0.5
    disc = param_blocks(arch.discriminator, rng.normal(size=arch.discriminator.n_params), False)
    z = rng.random((5, 3))

    def f(l):
        return estimate_kl(arch.discriminator, disc, generate_weights(arch.generator, param_blocks(arch.generator, l, False), z)).item()

    blocks = param_blocks(arch.generator, lam.copy())
    out = estimate_kl(arch.discriminator, disc, generate_weights(arch.generator, blocks, z))
    g = np.concatenate([b.data.ravel() for b in gradients(out, blocks)])
    h = 1e-6
    fd = np.array([(f(lam + e) - f(lam - e)) / (2 * h) for e in np.eye(lam.size) * h])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_identical_distributions_estimate_near_zero():
    spec = MlpSpec((1, 16, 1))
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(20_000, 1)), rng.normal(size=(20_000, 1))
    omega = fit_discriminator(spec, spec.init(rng), a, b, 300, lr=1e-2, batch=1024, rng=rng)
    est = estimate_kl(spec, param_blocks(spec, omega, False), rng.normal(size=(1000, 1))).item()
    assert abs(est) < 0.2


def _proxy_estimate(prior_mean, prior_std, seed=0):
    spec = MlpSpec((1, 32, 32, 1))
    rng = np.random.default_rng(seed)
    post = rng.normal(0.0, 1.0, (100_000, 1))
    prior = rng.normal(prior_mean, prior_std, (100_000, 1))
    omega = fit_discriminator(spec, spec.init(rng), prior, post, 1500, lr=1e-2, batch=2048, rng=rng)
    return estimate_kl(spec, param_blocks(spec, omega, False), rng.normal(0.0, 1.0, (100_000, 1))).item()


@pytest.mark.slow
def test_gaussian_proxy_mean_shift():
    assert _proxy_estimate(1.0, 1.0) == pytest.approx(0.5, abs=0.1)


@pytest.mark.slow
def test_gaussian_proxy_scale_sign_convention():
    assert _proxy_estimate(0.0, 2.0) == pytest.approx(math.log(2) + 1 / 8 - 1 / 2, abs=0.1)
