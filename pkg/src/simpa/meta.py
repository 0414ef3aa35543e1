"""Implicit-prior PAC-Bayes meta-learning: E-step adaptation, M-step
meta-update, the training loop and Monte-Carlo prediction.

Shapes: ``L`` latent draws, ``m`` data points, ``P`` base-network
parameters. Generator parameters (theta, lambda, psi) are flat vectors laid
out by ``arch.generator``; the same holds for the encoder and discriminator.

Random numbers come from ``RngStream``s keyed by (iteration, task, purpose)
and deliberately not by the hyper-posterior draw index k, so all K draws of
theta see the same latent noise (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import bound as pb
from .autodiff import Tensor, gradients, no_grad
from .environments import TaskBatch
from .kl_estimation import discriminator_grad, estimate_kl, smoothed_labels
from .networks import (
    CONCENTRATION_FLOOR,
    Architecture,
    base_forward,
    discriminate,
    flatten_grads,
    generate_weights,
    param_blocks,
    pooled_encoding,
)
from .optim import Adam, AdamState
from .stochastic import (
    HyperPosterior,
    RngStream,
    gaussian_kl,
    gaussian_kl_grad,
    sample_beta,
    sample_gaussian_noise,
    sample_theta,
)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    likelihood: str = "regression"  # or "classification"
    T: int = 2
    K: int = 4
    L_t: int = 16
    L_v: int = 16
    L_D: int = 128
    eta: int = 5
    alpha_t: float = 1e-3
    alpha_v: float = 1e-4
    gamma_t: float = 1e-4
    gamma_v: float = 1e-5
    nu: float = 1e-4
    delta: float = 0.01
    tau: float = 2.0
    sigma_theta: float = 1e-8
    prior_mu0: float = 0.0
    prior_sigma0: float = 10.0
    inner_grad: str = "first"  # or "second"
    noise: str = "beta"  # or "gaussian"
    label_smoothing: bool = True
    clip_gradient: str = "straight_through"  # or "zero"
    iterations: int = 10000
    seed: int = 0

    def __post_init__(self):
        for name in ("T", "K", "L_t", "L_v", "L_D", "iterations"):
            v = getattr(self, name)
            if int(v) != v or v < (0 if name == "iterations" else 1):
                raise ValueError(f"{name} must be a positive integer, got {v}")
        if int(self.eta) != self.eta or self.eta < 0:
            raise ValueError(f"eta must be a non-negative integer, got {self.eta}")
        for name in ("alpha_t", "alpha_v", "gamma_t", "gamma_v", "nu", "sigma_theta", "prior_sigma0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.likelihood not in ("regression", "classification"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.inner_grad not in ("first", "second"):
            raise ValueError(f"inner_grad must be 'first' or 'second', got {self.inner_grad!r}")
        if self.clip_gradient not in ("zero", "straight_through"):
            raise ValueError(f"clip_gradient must be 'zero' or 'straight_through', got {self.clip_gradient!r}")
        if self.noise not in ("beta", "gaussian"):
            raise ValueError(f"noise must be 'beta' or 'gaussian', got {self.noise!r}")
        self.bound_config  # validates delta, tau, T

    @property
    def bound_config(self) -> pb.BoundConfig:
        return pb.BoundConfig(self.delta, self.tau, self.T)


@dataclass
class MetaState:
    psi: np.ndarray
    enc: np.ndarray
    omega0: np.ndarray
    adam_psi: AdamState
    adam_enc: AdamState
    adam_omega: AdamState
    iteration: int = 0

    def copy(self) -> "MetaState":
        cp = lambda s: AdamState(s.m.copy(), s.v.copy(), s.t)
        return MetaState(
            self.psi.copy(), self.enc.copy(), self.omega0.copy(),
            cp(self.adam_psi), cp(self.adam_enc), cp(self.adam_omega), self.iteration,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Every numeric block, by name (used for checkpoints and comparisons)."""
        out = {"psi": self.psi, "enc": self.enc, "omega0": self.omega0}
        for tag in ("psi", "enc", "omega"):
            s: AdamState = getattr(self, f"adam_{tag}")
            out[f"adam_{tag}.m"], out[f"adam_{tag}.v"] = s.m, s.v
        return out


def init_generator(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    """Standard layer init, except the output bias, which is set to
    atanh of a freshly initialised base network so that generated weights
    start near a usable base-network scale rather than near zero."""
    theta = arch.generator.init(rng)
    if arch.generator.output_activation == "tanh":
        base = np.clip(arch.base.init(rng), -0.95, 0.95)
        theta[-arch.base.n_params :] = np.arctanh(base)
    return theta


def init_state(arch: Architecture, seed: int) -> MetaState:
    root = RngStream(seed, 0, -1)
    psi = init_generator(arch, root.child(purpose="init/generator").generator())
    enc = arch.encoder.init(root.child(purpose="init/encoder").generator())
    omega0 = arch.discriminator.init(root.child(purpose="init/discriminator").generator())
    return MetaState(psi, enc, omega0, AdamState.zeros(psi.size), AdamState.zeros(enc.size), AdamState.zeros(omega0.size))


def hyper_posterior(state: MetaState, cfg: TrainConfig) -> HyperPosterior:
    return HyperPosterior(state.psi, cfg.sigma_theta, cfg.prior_mu0, cfg.prior_sigma0)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def nll_terms(likelihood: str, out: Tensor, y: np.ndarray) -> Tensor:
    """Per-(draw, point) negative log-likelihood without constant terms.

    ``out`` is ``(L, m, out_dim)``. Regression: unit-variance Gaussian,
    0.5 (y - yhat)^2. Classification: softmax cross-entropy.
    """
    if likelihood == "regression":
        y = np.asarray(y, dtype=np.float64).reshape(1, -1)
        r = out[:, :, 0] - y
        return r * r * 0.5
    y = np.asarray(y, dtype=np.int64)
    logp = out.log_softmax(axis=-1)
    L, m = out.shape[0], out.shape[1]
    return -logp[np.arange(L)[:, None], np.arange(m)[None, :], y[None, :]]


def nll_constant(likelihood: str) -> float:
    return HALF_LOG_2PI if likelihood == "regression" else 0.0


# ---------------------------------------------------------------------------
# latent noise
# ---------------------------------------------------------------------------

def latent_params(arch: Architecture, enc_blocks, x_support, noise: str) -> tuple[Tensor, Tensor]:
    """Pooled encoder output mapped to the two latent-noise parameter vectors:
    Beta concentrations (both softplus + floor), or Gaussian mean and std."""
    pooled = pooled_encoding(arch.encoder, enc_blocks, x_support)
    if pooled.shape[0] % 2:
        raise ValueError("encoder output width must be even")
    Z = pooled.shape[0] // 2
    if noise == "beta":
        pos = pooled.softplus() + CONCENTRATION_FLOOR
        return pos[:Z], pos[Z:]
    return pooled[:Z], pooled[Z:].softplus() + CONCENTRATION_FLOOR


def sample_latent(noise: str, p1, p2, n: int, rng) -> Tensor:
    if noise == "beta":
        return sample_beta(p1, p2, n, rng)
    return sample_gaussian_noise(p1, p2, n, rng)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def vfe(arch: Architecture, likelihood: str, lam_blocks, omega_blocks, support: TaskBatch, z) -> Tensor:
    """-(1/L) sum_l [ V(G(z_l; lam)) + sum_k ln p(y_k | x_k, G(z_l; lam)) ]
    with constant normalisers dropped."""
    w = generate_weights(arch.generator, lam_blocks, z)
    V, _ = discriminate(arch.discriminator, omega_blocks, w)
    out = base_forward(arch.base, w, support.support_x)
    nll = nll_terms(likelihood, out, support.support_y)
    return -V.mean() + nll.sum(axis=1).mean()


@dataclass
class EStepResult:
    lam: list[Tensor]  # generator blocks; leaves in first-order mode
    omega: np.ndarray
    beta: tuple[np.ndarray, np.ndarray]
    last_vfe: float = float("nan")

    @property
    def lam_flat(self) -> np.ndarray:
        return flatten_grads(self.lam)


class LatentSampler:
    """Latent draws for fixed noise parameters, keyed by purpose and memoised.

    The draw for a purpose depends only on the stream id, so repeated
    requests (one per hyper-posterior draw) return the same array.
    """

    def __init__(self, noise: str, params: tuple, stream: RngStream):
        self.noise = noise
        self.p1, self.p2 = (np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64) for b in params)
        self.stream = stream
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def __call__(self, purpose: str, n: int) -> np.ndarray:
        key = (purpose, int(n))
        if key not in self._cache:
            rng = self.stream.child(purpose=f"{self.stream.purpose}/{purpose}")
            self._cache[key] = sample_latent(self.noise, self.p1, self.p2, n, rng).data
        return self._cache[key]

    def labels(self, purpose: str, n: int) -> np.ndarray:
        return smoothed_labels(n, self.stream.child(purpose=f"{self.stream.purpose}/{purpose}"))


def e_step(
    arch: Architecture,
    cfg: TrainConfig,
    theta,
    omega0: np.ndarray,
    support: TaskBatch,
    latents: LatentSampler,
    second_order: bool | None = None,
) -> EStepResult:
    """eta alternations of one discriminator ascent step (L_D draws, rate
    gamma_t) and one VFE descent step (fresh L_t draws, rate alpha_t).

    ``theta`` is a flat vector or a list of generator block Tensors; in
    second-order mode the returned lambda blocks stay connected to those
    Tensors. The discriminator gradient and the latent-noise parameters
    are constants here. Inputs are never modified.
    """
    second_order = cfg.inner_grad == "second" if second_order is None else second_order
    if isinstance(theta, np.ndarray):
        theta_blocks = param_blocks(arch.generator, theta.copy(), requires_grad=second_order)
    else:
        theta_blocks = list(theta)
    theta_const = [Tensor(b.data) for b in theta_blocks]
    lam = theta_blocks if second_order else [Tensor(b.data.copy(), requires_grad=True) for b in theta_blocks]
    omega = np.array(omega0, dtype=np.float64, copy=True)
    last = float("nan")
    for t in range(int(cfg.eta)):
        z = latents(f"disc/{t}", cfg.L_D)
        with no_grad():
            w_p = generate_weights(arch.generator, theta_const, z).data
            w_q = generate_weights(arch.generator, [Tensor(b.data) for b in lam], z).data
        labels = latents.labels(f"label/{t}", cfg.L_D) if cfg.label_smoothing else None
        _, g_om = discriminator_grad(arch.discriminator, omega, w_p, w_q, labels)
        omega = omega + cfg.gamma_t * g_om

        omega_blocks = param_blocks(arch.discriminator, omega, requires_grad=False)
        f = vfe(arch, cfg.likelihood, lam, omega_blocks, support, latents(f"vfe/{t}", cfg.L_t))
        last = f.item()
        g = gradients(f, lam, create_graph=second_order)
        if second_order:
            lam = [l - g_ * cfg.alpha_t for l, g_ in zip(lam, g)]
        else:
            lam = [Tensor(l.data - cfg.alpha_t * g_.data, requires_grad=True) for l, g_ in zip(lam, g)]
    return EStepResult(lam, omega, (latents.p1, latents.p2), last)


# ---------------------------------------------------------------------------
# query loss and per-task processing
# ---------------------------------------------------------------------------

def query_terms(
    arch: Architecture, likelihood: str, lam_blocks, omega_blocks, x, y, z, clip_gradient: str = "zero"
) -> tuple[Tensor, Tensor, Tensor]:
    """Clipped query loss, KL estimate and the raw per-(draw, point) NLL for
    one latent batch ``z`` shared by both estimates.

    ``clip_gradient="straight_through"`` keeps the clipped value but passes
    the gradient of the raw NLL."""
    w = generate_weights(arch.generator, lam_blocks, z)
    out = base_forward(arch.base, w, x)
    nll = nll_terms(likelihood, out, y)
    if nll.shape[1] == 0:
        raise ValueError("empty query set")
    if clip_gradient == "zero":
        loss = pb.clip_loss(nll).mean()
    else:
        loss = (nll + (pb.clip_loss(nll.data) - nll.data)).mean()
    kl = estimate_kl(arch.discriminator, omega_blocks, w)
    return loss, kl, nll


def query_loss(arch: Architecture, cfg: TrainConfig, lam, query: TaskBatch, beta, stream: RngStream) -> float:
    """Mean over query points and L_v generated networks of the clipped NLL."""
    lam_blocks = lam if isinstance(lam, list) else param_blocks(arch.generator, lam, False)
    if query.m_v == 0:
        raise ValueError("empty query set")
    with no_grad():
        z = sample_latent(cfg.noise, *beta, cfg.L_v, stream)
        w = generate_weights(arch.generator, lam_blocks, z)
        nll = nll_terms(cfg.likelihood, base_forward(arch.base, w, query.query_x), query.query_y)
        return pb.clip_loss(nll).mean().item()


def mixture_nll(likelihood: str, nll: np.ndarray) -> float:
    """-ln mean_s p(y | w_s) averaged over points, including constants.

    ``nll`` holds constant-free per-(draw, point) values."""
    full = nll + nll_constant(likelihood)
    S = full.shape[0]
    per_point = -(np.logaddexp.reduce(-full, axis=0) - math.log(S))
    return float(per_point.mean())


@dataclass
class TaskRecord:
    g_psi: np.ndarray  # gradient of the task's share of the psi objective
    g_enc: np.ndarray
    g_omega: np.ndarray  # mean over k of d L_D / d omega at omega_i
    emp_loss: float
    kl: float
    vfe: float
    ri: float
    nll: float
    disc_loss: float


def process_task(
    arch: Architecture,
    cfg: TrainConfig,
    state: MetaState,
    thetas: list[np.ndarray],
    task: TaskBatch,
    stream: RngStream,
) -> TaskRecord:
    """E-step for every theta draw, then the per-task gradients used by the
    M-step."""
    bcfg = cfg.bound_config
    K = len(thetas)
    second = cfg.inner_grad == "second"
    enc_blocks = param_blocks(arch.encoder, state.enc)
    p1, p2 = latent_params(arch, enc_blocks, task.support_x, cfg.noise)
    latents = LatentSampler(cfg.noise, (p1, p2), stream.child(purpose="e"))
    # query draws carry the encoder gradient; one batch serves every theta draw
    z = sample_latent(cfg.noise, p1, p2, cfg.L_v, stream.child(purpose="query"))
    zd = latents("meta-disc", cfg.L_D)
    meta_labels = latents.labels("meta-label", cfg.L_D) if cfg.label_smoothing else None

    losses, kls, nlls, roots, vfes, disc_vals, g_omega = [], [], [], [], [], [], np.zeros_like(state.omega0)
    for theta in thetas:
        theta_blocks = param_blocks(arch.generator, theta.copy(), requires_grad=True)
        res = e_step(arch, cfg, theta_blocks if second else theta, state.omega0, task, latents, second)
        omega_blocks = param_blocks(arch.discriminator, res.omega, requires_grad=False)
        loss, kl, nll = query_terms(
            arch, cfg.likelihood, res.lam, omega_blocks, task.query_x, task.query_y, z, cfg.clip_gradient
        )
        losses.append(loss)
        kls.append(kl)
        nlls.append(nll.data)
        roots.append(theta_blocks if second else res.lam)
        vfes.append(res.last_vfe)
        # first-order meta-gradient for omega0: objective gradient at omega_i
        with no_grad():
            w_p = generate_weights(arch.generator, param_blocks(arch.generator, theta, False), zd).data
            w_q = generate_weights(arch.generator, [Tensor(b.data) for b in res.lam], zd).data
        val, g = discriminator_grad(arch.discriminator, res.omega, w_p, w_q, meta_labels)
        disc_vals.append(val)
        g_omega += g / K

    mean_loss = sum(losses[1:], losses[0]) * (1.0 / K)
    mean_kl = sum(kls[1:], kls[0]) * (1.0 / K)
    ri = pb.compute_Ri(mean_kl, task.m_v, bcfg)
    # the estimate is unbounded below; clamping stops psi from exploiting
    # a lagging discriminator, as R_i already does
    obj_psi = mean_loss + mean_kl.clip(0.0) + ri
    obj_enc = mean_loss + ri
    leaves = [b for blocks in roots for b in blocks]
    g_leaves = gradients(obj_psi, leaves, allow_unused=True)
    n_blocks = len(roots[0])
    g_psi = sum(flatten_grads(g_leaves[k * n_blocks : (k + 1) * n_blocks]) for k in range(K))
    g_enc = flatten_grads(gradients(obj_enc, enc_blocks, allow_unused=True))
    return TaskRecord(
        g_psi=g_psi,
        g_enc=g_enc,
        g_omega=g_omega,
        emp_loss=mean_loss.item(),
        kl=mean_kl.item(),
        vfe=float(np.mean(vfes)) if vfes else float("nan"),
        ri=ri.item(),
        nll=mixture_nll(cfg.likelihood, np.concatenate(nlls, axis=0)),
        disc_loss=float(np.mean(disc_vals)),
    )


def sample_thetas(state: MetaState, cfg: TrainConfig, stream: RngStream) -> list[np.ndarray]:
    """K draws psi + sigma_theta * eps."""
    h = hyper_posterior(state, cfg)
    return [sample_theta(h, stream.child(purpose=f"theta/{k}")) for k in range(cfg.K)]


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

def m_step(state: MetaState, records: list[TaskRecord], cfg: TrainConfig) -> tuple[MetaState, pb.BoundReport]:
    """Adam updates of psi (alpha_v), the encoder (nu) and omega0 (ascent at
    gamma_v), and the bound report of the meta-batch."""
    bcfg = cfg.bound_config
    if len(records) != cfg.T:
        raise ValueError(f"expected {cfg.T} task records, got {len(records)}")
    h = hyper_posterior(state, cfg)
    kl_h = gaussian_kl(h)
    r0 = pb.compute_R0(kl_h, bcfg)
    T = len(records)
    g_klh = gaussian_kl_grad(h)
    g_r0 = g_klh / (4.0 * (T - 1) * r0)
    g_psi = sum(r.g_psi for r in records) / T + g_r0 + g_klh
    g_enc = sum(r.g_enc for r in records) / T
    g_omega = sum(r.g_omega for r in records) / T
    for name, g in (("psi", g_psi), ("encoder", g_enc), ("discriminator", g_omega)):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite {name} gradient at iteration {state.iteration}")
    psi, a_psi = Adam(cfg.alpha_v).step(state.psi, g_psi, state.adam_psi)
    enc, a_enc = Adam(cfg.nu).step(state.enc, g_enc, state.adam_enc)
    omega0, a_om = Adam(cfg.gamma_v).step(state.omega0, -g_omega, state.adam_omega)
    new = MetaState(psi, enc, omega0, a_psi, a_enc, a_om, state.iteration + 1)

    report = _report(records, kl_h, bcfg, cfg.K)
    report.extra["nll"] = float(np.mean([r.nll for r in records]))
    report.extra["iteration"] = state.iteration
    return new, report


def _report(records: list[TaskRecord], kl_h: float, bcfg: pb.BoundConfig, K: int) -> pb.BoundReport:
    emp = [r.emp_loss for r in records]
    kl = [r.kl for r in records]
    ri = [r.ri for r in records]
    r0 = pb.compute_R0(kl_h, bcfg)
    T = len(records)
    bound = math.fsum(e + max(k, 0.0) for e, k in zip(emp, kl)) / T + math.fsum(ri) / T + r0
    d0, di = pb.split_confidence(bcfg)
    return pb.BoundReport(emp, [r.vfe for r in records], kl, ri, r0, kl_h, bound, d0, di, K)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

TaskSampler = Callable[[RngStream], TaskBatch]


def meta_iteration(arch: Architecture, cfg: TrainConfig, state: MetaState, sample_task: TaskSampler) -> tuple[MetaState, pb.BoundReport]:
    it = state.iteration
    root = RngStream(cfg.seed, it, -1, "")
    thetas = sample_thetas(state, cfg, root)
    records = []
    for i in range(cfg.T):
        ts = RngStream(cfg.seed, it, i, "")
        task = sample_task(ts.child(purpose="task"))
        records.append(process_task(arch, cfg, state, thetas, task, ts))
    return m_step(state, records, cfg)


def train_iter(arch: Architecture, cfg: TrainConfig, sample_task: TaskSampler, state: MetaState | None = None, iterations: int | None = None) -> Iterator[tuple[MetaState, pb.BoundReport]]:
    """Yield (state, report) after every meta-iteration, up to ``iterations``
    total (counted from zero, so a resumed state continues the count)."""
    state = init_state(arch, cfg.seed) if state is None else state
    total = cfg.iterations if iterations is None else iterations
    while state.iteration < total:
        state, report = meta_iteration(arch, cfg, state, sample_task)
        yield state, report


def train(arch: Architecture, cfg: TrainConfig, sample_task: TaskSampler, state: MetaState | None = None, iterations: int | None = None) -> tuple[MetaState, list[pb.BoundReport]]:
    state = init_state(arch, cfg.seed) if state is None else state
    reports = []
    for state, rep in train_iter(arch, cfg, sample_task, state, iterations):
        reports.append(rep)
    return state, reports


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

@dataclass
class Predictive:
    """Regression: ``samples`` of predicted means, shape (S, m).
    Classification: per-draw class probabilities, shape (S, m, N)."""

    likelihood: str
    samples: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.samples.std(axis=0)

    @property
    def probs(self) -> np.ndarray:
        if self.likelihood != "classification":
            raise ValueError("class probabilities exist only for classification")
        return self.samples.mean(axis=0)

    def nll(self, y: np.ndarray) -> float:
        """Mean negative log predictive density/probability over points."""
        y = np.asarray(y)
        if self.likelihood == "regression":
            r = self.samples - y.reshape(1, -1)
            return mixture_nll("regression", 0.5 * r * r)
        p = self.probs[np.arange(len(y)), y.astype(np.int64)]
        with np.errstate(divide="ignore"):
            return float(-np.log(p).mean())


def predict(arch: Architecture, cfg: TrainConfig, state: MetaState, support: TaskBatch, x_query: np.ndarray, stream: RngStream, K: int | None = None) -> Predictive:
    """Adapt to ``support`` for each of K theta draws and average the
    predictions of L_v generated networks per draw."""
    K = cfg.K if K is None else K
    with no_grad():
        enc_blocks = param_blocks(arch.encoder, state.enc, False)
        p1, p2 = latent_params(arch, enc_blocks, support.support_x, cfg.noise)
    latents = LatentSampler(cfg.noise, (p1, p2), stream.child(purpose="e"))
    z = sample_latent(cfg.noise, latents.p1, latents.p2, cfg.L_v, stream.child(purpose="query")).data
    h = hyper_posterior(state, cfg)
    outs = []
    for k in range(K):
        theta = sample_theta(h, stream.child(purpose=f"theta/{k}"))
        res = e_step(arch, cfg, theta, state.omega0, support, latents, second_order=False)
        with no_grad():
            w = generate_weights(arch.generator, [Tensor(b.data) for b in res.lam], z)
            outs.append(base_forward(arch.base, w, x_query).data)
    out = np.concatenate(outs, axis=0)
    if cfg.likelihood == "regression":
        return Predictive("regression", out[:, :, 0])
    logp = out - out.max(axis=-1, keepdims=True)
    p = np.exp(logp)
    return Predictive("classification", p / p.sum(axis=-1, keepdims=True))


@dataclass
class TaskEvaluation:
    """Bound ingredients of one task, plus the oracle loss when the task
    carries a hidden oracle query set (``nan`` otherwise)."""

    emp_loss: float
    kl: float
    ri: float
    true_loss: float


def evaluate_task(arch: Architecture, cfg: TrainConfig, state: MetaState, task: TaskBatch, stream: RngStream) -> TaskEvaluation:
    """Gradient-free E-step and query terms for every theta draw; the same
    latent draws score the observed and the oracle query points."""
    thetas = sample_thetas(state, cfg, stream)
    with no_grad():
        enc_blocks = param_blocks(arch.encoder, state.enc, False)
        p1, p2 = latent_params(arch, enc_blocks, task.support_x, cfg.noise)
    latents = LatentSampler(cfg.noise, (p1, p2), stream.child(purpose="e"))
    z = sample_latent(cfg.noise, latents.p1, latents.p2, cfg.L_v, stream.child(purpose="query")).data
    losses, kls, trues = [], [], []
    for theta in thetas:
        res = e_step(arch, cfg, theta, state.omega0, task, latents, second_order=False)
        with no_grad():
            lam = [Tensor(b.data) for b in res.lam]
            omega_blocks = param_blocks(arch.discriminator, res.omega, False)
            loss, kl, _ = query_terms(arch, cfg.likelihood, lam, omega_blocks, task.query_x, task.query_y, z)
            losses.append(loss.item())
            kls.append(kl.item())
            if task.oracle_x is not None and len(task.oracle_x):
                w = generate_weights(arch.generator, lam, z)
                nll = nll_terms(cfg.likelihood, base_forward(arch.base, w, task.oracle_x), task.oracle_y)
                trues.append(pb.clip_loss(nll).mean().item())
    kl = float(np.mean(kls))
    ri = pb.compute_Ri(kl, task.m_v, cfg.bound_config)
    return TaskEvaluation(float(np.mean(losses)), kl, float(ri), float(np.mean(trues)) if trues else float("nan"))
