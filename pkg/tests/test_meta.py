import math

import numpy as np
import pytest

from simpa.environments import TaskBatch, sample_blob_classification_task, sample_regression_task
from simpa.meta import (
    HALF_LOG_2PI,
    LatentSampler,
    TaskRecord,
    TrainConfig,
    e_step,
    hyper_posterior,
    init_state,
    latent_params,
    m_step,
    predict,
    process_task,
    query_loss,
    sample_latent,
    train,
    vfe,
)
from simpa.networks import Architecture, base_forward, generate_weights, param_blocks
from simpa.stochastic import RngStream, sample_theta


def linear_arch(Z=2, out=1):
    # base y = w0 * x + w1, generator w = z A + c, discriminator V = u . w + b0
    return Architecture.build(1, out, Z, (), (), (), (2,), generator_output="identity")


def tiny_arch(out=1, in_dim=1):
    return Architecture.build(in_dim, out, 3, (4,), (5,), (6,), (4,))


def gen_flat(A, c):
    return np.concatenate([np.asarray(A, float).ravel(), np.asarray(c, float)])


def reg_task(x, y, qx=None, qy=None):
    x, y = np.asarray(x, float).reshape(-1, 1), np.asarray(y, float).reshape(-1, 1)
    qx = x if qx is None else np.asarray(qx, float).reshape(-1, 1)
    qy = y if qy is None else np.asarray(qy, float).reshape(-1, 1)
    return TaskBatch(x, y, qx, qy)


def fixed_latents(arch, seed=0):
    Z = arch.latent_dim
    return LatentSampler("beta", (np.full(Z, 2.0), np.full(Z, 3.0)), RngStream(seed, 0, 0, "e"))


def test_vfe_perfect_fit_and_zero_discriminator():
    arch = linear_arch()
    lam = param_blocks(arch.generator, gen_flat(np.zeros((2, 2)), [1.0, 0.0]))
    omega = param_blocks(arch.discriminator, np.zeros(3), False)
    task = reg_task([-1.0, 0.5, 2.0], [-1.0, 0.5, 2.0])
    z = np.random.default_rng(0).random((8, 2))
    assert vfe(arch, "regression", lam, omega, task, z).item() == 0.0


def test_vfe_constant_discriminator_shifts_by_minus_c():
    arch = linear_arch()
    rng = np.random.default_rng(1)
    lam = param_blocks(arch.generator, rng.normal(size=arch.generator.n_params))
    task = reg_task(rng.normal(size=4), rng.normal(size=4))
    z = rng.random((6, 2))
    base = vfe(arch, "regression", lam, param_blocks(arch.discriminator, np.zeros(3), False), task, z).item()
    shifted = vfe(arch, "regression", lam, param_blocks(arch.discriminator, np.array([0, 0, 2.5]), False), task, z).item()
    assert shifted == pytest.approx(base - 2.5, abs=1e-13)


def test_vfe_hand_computation():
    arch = linear_arch()
    rng = np.random.default_rng(2)
    A, c = rng.normal(size=(2, 2)), rng.normal(size=2)
    u, b0 = rng.normal(size=2), 0.3
    x0, y0 = 0.7, -1.2
    z = rng.random((5, 2))
    got = vfe(
        arch, "regression", param_blocks(arch.generator, gen_flat(A, c)),
        param_blocks(arch.discriminator, np.array([*u, b0]), False), reg_task([x0], [y0]), z,
    ).item()
    w = z @ A + c
    V = w @ u + b0
    yhat = w[:, 0] * x0 + w[:, 1]
    hand = np.mean(-V + 0.5 * (y0 - yhat) ** 2 + HALF_LOG_2PI)
    assert abs(got + HALF_LOG_2PI - hand) < 1e-10


def test_e_step_eta_zero_is_identity():
    arch = tiny_arch()
    rng = np.random.default_rng(3)
    theta = rng.normal(size=arch.generator.n_params)
    omega0 = rng.normal(size=arch.discriminator.n_params)
    res = e_step(arch, TrainConfig(eta=0), theta, omega0, sample_regression_task(RngStream(0)), fixed_latents(arch))
    assert np.array_equal(res.lam_flat, theta) and np.array_equal(res.omega, omega0)


def test_e_step_zero_gradient_keeps_theta():
    # perfect fit and identical prior/posterior samples at omega = 0: both
    # the discriminator ascent and the VFE descent see zero gradients
    arch = linear_arch()
    theta = gen_flat(np.zeros((2, 2)), [1.0, 0.0])
    cfg = TrainConfig(eta=1, label_smoothing=False, L_D=8, L_t=4)
    res = e_step(arch, cfg, theta, np.zeros(3), reg_task([0.3, -2.0], [0.3, -2.0]), fixed_latents(arch))
    assert np.array_equal(res.lam_flat, theta) and np.array_equal(res.omega, np.zeros(3))


def test_e_step_one_step_matches_hand_gradient():
    arch = linear_arch()
    rng = np.random.default_rng(4)
    c = np.array([0.4, -0.1])
    theta = gen_flat(np.zeros((2, 2)), c)
    x, y = rng.normal(size=3), rng.normal(size=3)
    cfg = TrainConfig(eta=1, label_smoothing=False, alpha_t=0.05, L_D=8, L_t=4)
    res = e_step(arch, cfg, theta, np.zeros(3), reg_task(x, y), fixed_latents(arch))
    # with A = 0 the VFE is sum_k 0.5 (y_k - c0 x_k - c1)^2, independent of z
    r = y - (c[0] * x + c[1])
    grad_c = np.array([-(r * x).sum(), -r.sum()])
    z = fixed_latents(arch)("vfe/0", 4)
    grad_A = np.outer(z.mean(axis=0), grad_c)
    expect = gen_flat(-cfg.alpha_t * grad_A, c - cfg.alpha_t * grad_c)
    assert np.max(np.abs(res.lam_flat - expect)) < 1e-12
    assert np.array_equal(res.omega, np.zeros(3))


def test_e_step_does_not_mutate_inputs():
    arch = tiny_arch()
    rng = np.random.default_rng(5)
    theta = rng.normal(size=arch.generator.n_params)
    omega0 = rng.normal(size=arch.discriminator.n_params)
    task = sample_regression_task(RngStream(1))
    copies = (theta.copy(), omega0.copy(), task.support_x.copy(), task.support_y.copy())
    for inner in ("first", "second"):
        e_step(arch, TrainConfig(eta=3, L_D=8, L_t=4, inner_grad=inner, alpha_t=0.1, gamma_t=0.1), theta, omega0, task, fixed_latents(arch))
    for a, b in zip(copies, (theta, omega0, task.support_x, task.support_y)):
        assert np.array_equal(a, b)


def test_query_loss_uniform_five_way_clips_to_one():
    arch = Architecture.build(2, 5, 2, (), (), (), (2,), generator_output="identity")
    lam = np.zeros(arch.generator.n_params)
    task = sample_blob_classification_task(RngStream(2), N=5, k=1)
    cfg = TrainConfig(likelihood="classification", L_v=4)
    beta = (np.ones(2), np.ones(2))
    assert math.log(5) > 1.0
    assert query_loss(arch, cfg, lam, task, beta, RngStream(0).generator()) == 1.0


def test_query_loss_perfect_classifier_is_zero():
    # logits 1e3 * (x . e_c) put probability 1 on the class of the sign
    arch = Architecture.build(1, 2, 1, (), (), (), (2,), generator_output="identity")
    lam = gen_flat(np.zeros((1, 4)), [1e3, -1e3, 0.0, 0.0])
    x = np.array([[1.0], [2.0], [-1.0]])
    task = TaskBatch(x, np.array([0, 0, 1]), x, np.array([0, 0, 1]))
    cfg = TrainConfig(likelihood="classification", L_v=3)
    assert query_loss(arch, cfg, lam, task, (np.ones(1), np.ones(1)), RngStream(0).generator()) == 0.0


def test_query_loss_duplicated_query_invariant():
    arch = tiny_arch()
    rng = np.random.default_rng(6)
    lam = rng.normal(size=arch.generator.n_params) * 0.3
    task = sample_regression_task(RngStream(3))
    dup = TaskBatch(task.support_x, task.support_y, np.concatenate([task.query_x] * 2), np.concatenate([task.query_y] * 2))
    cfg = TrainConfig(L_v=8)
    beta = (np.full(3, 2.0), np.full(3, 2.0))
    a = query_loss(arch, cfg, lam, task, beta, RngStream(9).generator())
    b = query_loss(arch, cfg, lam, dup, beta, RngStream(9).generator())
    assert a == pytest.approx(b, abs=1e-14)


def test_query_loss_empty_raises():
    arch = tiny_arch()
    task = TaskBatch(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(ValueError):
        query_loss(arch, TrainConfig(), np.zeros(arch.generator.n_params), task, (np.ones(3), np.ones(3)), RngStream(0).generator())


def test_m_step_zero_gradients_only_advance_counter():
    arch = tiny_arch()
    state = init_state(arch, 0)
    state.psi[:] = 0.0  # KL_h gradient vanishes at the prior mean
    z = lambda a: np.zeros_like(a)
    recs = [TaskRecord(z(state.psi), z(state.enc), z(state.omega0), 0.1, 0.0, 0.0, 0.5, 0.2, -1.0) for _ in range(2)]
    new, rep = m_step(state, recs, TrainConfig(T=2))
    assert new.iteration == 1
    for k, v in state.arrays().items():
        assert np.array_equal(new.arrays()[k], v), k
    assert np.isfinite(rep.bound)


def test_m_step_non_finite_gradient_raises():
    arch = tiny_arch()
    state = init_state(arch, 0)
    g = np.zeros_like(state.psi)
    g[0] = np.nan
    recs = [TaskRecord(g, np.zeros_like(state.enc), np.zeros_like(state.omega0), 0.1, 0.0, 0.0, 0.5, 0.2, -1.0)] * 2
    with pytest.raises(FloatingPointError):
        m_step(state, recs, TrainConfig(T=2))


def _objective(arch, cfg, state, thetas, task, stream):
    r = process_task(arch, cfg, state, thetas, task, stream)
    return r.emp_loss + max(r.kl, 0.0) + r.ri


def _small_task(seed):
    task = sample_regression_task(RngStream(seed, 0, 0, "t"))
    task.support_y, task.query_y = task.support_y * 0.1, task.query_y * 0.1  # keep NLL below the clip
    return task


@pytest.mark.parametrize("clip", ["zero", "straight_through"])
def test_process_task_psi_gradient_matches_fd(clip):
    arch = Architecture.build(1, 1, 3, (4,), (5,), (6,), (4,))
    cfg = TrainConfig(K=2, L_D=4, L_t=3, L_v=5, eta=0, clip_gradient=clip)
    state = init_state(arch, 1)
    task, ts = _small_task(3), RngStream(5, 0, 0, "")
    rec = process_task(arch, cfg, state, [state.psi.copy()] * 2, task, ts)

    def f(psi):
        s = state.copy()
        s.psi = psi
        return _objective(arch, cfg, s, [psi.copy()] * 2, task, ts)

    h = 1e-6
    idx = np.linspace(0, state.psi.size - 1, 25).astype(int)
    fd = np.array([(f(state.psi + h * e) - f(state.psi - h * e)) / (2 * h) for e in np.eye(state.psi.size)[idx]])
    # process_task returns the sum over the K draws of d obj / d theta_k
    assert np.max(np.abs(rec.g_psi[idx] - fd)) < 1e-6 * max(1.0, np.abs(fd).max())


def test_process_task_second_order_gradient_matches_fd():
    arch = Architecture.build(1, 1, 3, (4,), (5,), (6,), (4,))
    # negligible discriminator step, so omega_i does not depend on theta
    cfg = TrainConfig(K=1, L_D=4, L_t=3, L_v=5, eta=2, alpha_t=0.05, gamma_t=1e-12, inner_grad="second")
    state = init_state(arch, 2)
    task, ts = _small_task(4), RngStream(6, 0, 0, "")
    rec = process_task(arch, cfg, state, [state.psi.copy()], task, ts)

    def f(psi):
        s = state.copy()
        s.psi = psi
        return _objective(arch, cfg, s, [psi.copy()], task, ts)

    h = 1e-6
    idx = np.linspace(0, state.psi.size - 1, 25).astype(int)
    fd = np.array([(f(state.psi + h * e) - f(state.psi - h * e)) / (2 * h) for e in np.eye(state.psi.size)[idx]])
    assert np.max(np.abs(rec.g_psi[idx] - fd)) < 1e-6 * max(1.0, np.abs(fd).max())


def test_process_task_encoder_gradient_matches_fd():
    arch = Architecture.build(1, 1, 3, (4,), (5,), (6,), (4,))
    cfg = TrainConfig(K=2, L_D=4, L_t=3, L_v=5, eta=0)
    state = init_state(arch, 3)
    task, ts = _small_task(5), RngStream(7, 0, 0, "")
    thetas = [state.psi.copy(), state.psi + 0.01]
    rec = process_task(arch, cfg, state, thetas, task, ts)

    def f(enc):
        s = state.copy()
        s.enc = enc
        r = process_task(arch, cfg, s, thetas, task, ts)
        return r.emp_loss + r.ri

    h = 1e-6
    fd = np.array([(f(state.enc + h * e) - f(state.enc - h * e)) / (2 * h) for e in np.eye(state.enc.size)])
    assert np.max(np.abs(rec.g_enc - fd)) < 1e-5 * max(1.0, np.abs(fd).max())


def _train_small(iterations, seed=0, **kw):
    arch = tiny_arch()
    cfg = TrainConfig(T=2, K=2, L_t=4, L_v=4, L_D=8, eta=2, iterations=iterations, seed=seed, **kw)
    return train(arch, cfg, lambda s: sample_regression_task(s))


def test_zero_iterations_returns_initial_state():
    state, reports = _train_small(0)
    init = init_state(tiny_arch(), 0)
    assert reports == [] and state.iteration == 0
    for k, v in init.arrays().items():
        assert np.array_equal(state.arrays()[k], v)


def test_training_is_bit_deterministic():
    a, ra = _train_small(10, seed=4)
    b, rb = _train_small(10, seed=4)
    for k, v in a.arrays().items():
        assert np.array_equal(b.arrays()[k], v), k
    assert [r.bound for r in ra] == [r.bound for r in rb]
    c, _ = _train_small(10, seed=5)
    assert not np.array_equal(c.psi, a.psi)


def test_second_order_training_runs_and_differs():
    a, _ = _train_small(3, inner_grad="first", alpha_t=0.1)
    b, _ = _train_small(3, inner_grad="second", alpha_t=0.1)
    assert np.all(np.isfinite(b.psi)) and not np.array_equal(a.psi, b.psi)


def test_smoke_fifty_iterations_finite():
    state, reports = _train_small(50)
    assert state.iteration == 50 and len(reports) == 50
    for r in reports:
        assert all(np.isfinite(v) for v in (r.bound, r.r0, r.kl_hyper, *r.emp_loss, *r.kl_task, *r.ri))
        assert all(0.0 <= e <= 1.0 for e in r.emp_loss)


def test_gaussian_noise_family_trains():
    state, reports = _train_small(3, noise="gaussian")
    assert np.all(np.isfinite(state.psi)) and len(reports) == 3


def _classification_setup(K, L_v, sigma_theta=1e-8, eta=2):
    arch = tiny_arch(out=3, in_dim=2)
    cfg = TrainConfig(likelihood="classification", K=K, L_v=L_v, L_t=4, L_D=8, eta=eta, sigma_theta=sigma_theta)
    state = init_state(arch, 7)
    task = sample_blob_classification_task(RngStream(8), N=3, k=2)
    return arch, cfg, state, task


def test_predict_outputs_on_simplex_and_averaging_order():
    arch, cfg, state, task = _classification_setup(K=3, L_v=5, sigma_theta=0.05)
    pred = predict(arch, cfg, state, task, task.query_x, RngStream(9))
    assert pred.samples.shape == (15, len(task.query_x), 3)
    assert np.max(np.abs(pred.probs.sum(-1) - 1.0)) < 1e-9
    nested = pred.samples.reshape(3, 5, -1, 3).mean(axis=1).mean(axis=0)
    assert np.max(np.abs(nested - pred.probs)) < 1e-12


def test_predict_single_draw_is_one_forward_pass():
    arch, cfg, state, task = _classification_setup(K=1, L_v=1, eta=0)
    stream = RngStream(10)
    pred = predict(arch, cfg, state, task, task.query_x, stream)
    enc = param_blocks(arch.encoder, state.enc, False)
    p1, p2 = latent_params(arch, enc, task.support_x, cfg.noise)
    z = sample_latent(cfg.noise, p1.data, p2.data, 1, stream.child(purpose="query")).data
    theta = sample_theta(hyper_posterior(state, cfg), stream.child(purpose="theta/0"))
    out = base_forward(arch.base, generate_weights(arch.generator, param_blocks(arch.generator, theta, False), z), task.query_x).data[0]
    p = np.exp(out - out.max(-1, keepdims=True))
    assert pred.samples.shape[0] == 1
    assert np.max(np.abs(pred.probs - p / p.sum(-1, keepdims=True))) < 1e-14


def test_predict_collapses_to_single_draw_as_sigma_vanishes():
    arch, cfg, state, task = _classification_setup(K=4, L_v=3, sigma_theta=1e-10, eta=0)
    many = predict(arch, cfg, state, task, task.query_x, RngStream(11))
    one = predict(arch, cfg, state, task, task.query_x, RngStream(11), K=1)
    assert np.max(np.abs(many.probs - one.probs)) < 1e-6


def test_regression_predictive_summary():
    arch = tiny_arch()
    state = init_state(arch, 0)
    task = sample_regression_task(RngStream(12))
    pred = predict(arch, TrainConfig(K=2, L_v=6, eta=1), state, task, task.query_x, RngStream(13))
    assert pred.samples.shape == (12, task.m_v)
    assert np.all(pred.std >= 0) and np.isfinite(pred.nll(task.query_y.ravel()))
    with pytest.raises(ValueError):
        pred.probs


def test_config_validation():
    for bad in ({"K": 0}, {"eta": -1}, {"alpha_t": 0.0}, {"inner_grad": "third"}, {"noise": "cauchy"}, {"delta": 2.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.mark.slow
def test_bound_running_mean_decreases_over_500_iterations():
    # the prescribed rates and sample counts on a small architecture
    arch = Architecture.build(1, 1, 8, (16, 16), (32,), (32,), (16,))
    cfg = TrainConfig(K=1, L_D=16, iterations=500, seed=0)
    _, reports = train(arch, cfg, lambda s: sample_regression_task(s))
    bounds = np.array([r.bound for r in reports])
    assert bounds[-100:].mean() <= bounds[:100].mean()
