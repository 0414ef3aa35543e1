"""KL divergence between two implicit weight distributions, estimated by
training a discriminator to tell prior samples ("real") from posterior
samples ("fake").

With D = sigmoid(V) maximising E_p[ln D] + E_q[ln(1 - D)], the optimum has
V = ln p/q, so KL[q || p] = E_q[ln q/p] = -E_q[V].
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, gradients, no_grad
from .networks import Architecture, MlpSpec, discriminate, flatten_grads, generate_weights, param_blocks
from .optim import Adam, AdamState
from .stochastic import as_generator

SMOOTHING_LOW = 0.95


def smoothed_labels(n: int, rng, low: float = SMOOTHING_LOW) -> np.ndarray:
    """Real targets drawn from U[low, 1]; the matching fake target is 1 - real."""
    return as_generator(rng).uniform(low, 1.0, size=int(n))


def _bce(V: Tensor, target) -> Tensor:
    """Per-sample t ln D + (1 - t) ln(1 - D) in log-sigmoid form."""
    t = np.asarray(target, dtype=np.float64)
    return V.log_sigmoid() * t + (-V).log_sigmoid() * (1.0 - t)


def discriminator_objective(
    spec: MlpSpec,
    disc_blocks: Sequence[Tensor],
    w_prior,
    w_post,
    real_labels: np.ndarray | None = None,
) -> Tensor:
    """Mean ln D(prior) + mean ln(1 - D(posterior)), to be maximised.

    ``real_labels`` (one per prior sample, reused for the posterior rows as
    ``1 - real``) switches on label smoothing; ``None`` uses hard 1/0 targets.
    """
    V_p, _ = discriminate(spec, disc_blocks, w_prior)
    V_q, _ = discriminate(spec, disc_blocks, w_post)
    if V_p.shape[0] < 1 or V_q.shape[0] < 1:
        raise ValueError("discriminator loss needs at least one sample per class")
    if real_labels is None:
        return V_p.log_sigmoid().mean() + (-V_q).log_sigmoid().mean()
    r = np.asarray(real_labels, dtype=np.float64)
    if r.shape != (V_p.shape[0],) or V_q.shape[0] != V_p.shape[0]:
        raise ValueError("one smoothed label per prior/posterior sample pair is required")
    return _bce(V_p, r).mean() + _bce(V_q, 1.0 - r).mean()


def discriminator_loss(arch: Architecture, omega: np.ndarray, theta: np.ndarray, lam: np.ndarray, z, labels=None) -> float:
    """Objective value for flat parameter vectors and one latent batch ``z``.

    Prior and posterior samples share the latent draws, G(z; theta) versus
    G(z; lam).
    """
    with no_grad():
        w_p = generate_weights(arch.generator, param_blocks(arch.generator, theta, False), z)
        w_q = generate_weights(arch.generator, param_blocks(arch.generator, lam, False), z)
        return discriminator_objective(arch.discriminator, param_blocks(arch.discriminator, omega, False), w_p, w_q, labels).item()


def discriminator_grad(spec: MlpSpec, omega: np.ndarray, w_prior, w_post, real_labels=None) -> tuple[float, np.ndarray]:
    """Objective value and its gradient with respect to the flat ``omega``."""
    blocks = param_blocks(spec, omega)
    obj = discriminator_objective(spec, blocks, w_prior, w_post, real_labels)
    return obj.item(), flatten_grads(gradients(obj, blocks))


def discriminator_step(spec: MlpSpec, omega: np.ndarray, w_prior, w_post, lr: float, real_labels=None) -> np.ndarray:
    """One plain gradient-ascent step."""
    _, g = discriminator_grad(spec, omega, w_prior, w_post, real_labels)
    return omega + lr * g


def adapt_discriminator(
    arch: Architecture,
    omega0: np.ndarray,
    theta: np.ndarray,
    lam: np.ndarray,
    sample_z: Callable[[int, int], np.ndarray],
    n_steps: int,
    n_samples: int,
    lr: float,
    label_rng=None,
) -> np.ndarray:
    """Task-level ascent from ``omega0``.

    ``sample_z(step, n)`` returns fresh latent draws for each step.
    ``label_rng(step)`` returns a generator for smoothed labels; ``None``
    trains with hard labels. ``n_steps`` is the step cap.
    """
    omega = np.array(omega0, dtype=np.float64, copy=True)
    gen_t = param_blocks(arch.generator, theta, False)
    gen_l = param_blocks(arch.generator, lam, False)
    for step in range(int(n_steps)):
        z = sample_z(step, n_samples)
        with no_grad():
            w_p = generate_weights(arch.generator, gen_t, z).data
            w_q = generate_weights(arch.generator, gen_l, z).data
        labels = None if label_rng is None else smoothed_labels(len(z), label_rng(step))
        omega = discriminator_step(arch.discriminator, omega, w_p, w_q, lr, labels)
    return omega


def kl_from_logits(V: Tensor) -> Tensor:
    return -V.mean()


def estimate_kl(spec: MlpSpec, disc_blocks: Sequence[Tensor], w_post) -> Tensor:
    """-mean V over posterior samples; differentiable in ``w_post`` (and so
    in the generator parameters that produced it)."""
    V, _ = discriminate(spec, disc_blocks, w_post)
    return kl_from_logits(V)


def fit_discriminator(
    spec: MlpSpec,
    omega0: np.ndarray,
    w_prior: np.ndarray,
    w_post: np.ndarray,
    n_steps: int,
    lr: float = 1e-2,
    batch: int | None = None,
    rng=None,
) -> np.ndarray:
    """Adam ascent on the hard-label objective over fixed sample sets, with
    paired minibatches of size ``batch`` (full batch when ``None``).

    Used to train a density-ratio discriminator to convergence on proxy
    samples, outside the meta-learning loop.
    """
    gen = as_generator(rng if rng is not None else 0)
    w_prior, w_post = np.asarray(w_prior, dtype=np.float64), np.asarray(w_post, dtype=np.float64)
    omega = np.array(omega0, dtype=np.float64, copy=True)
    opt, state = Adam(lr), AdamState.zeros(omega.size)
    for _ in range(int(n_steps)):
        if batch is None:
            wp, wq = w_prior, w_post
        else:
            wp = w_prior[gen.integers(0, len(w_prior), batch)]
            wq = w_post[gen.integers(0, len(w_post), batch)]
        _, g = discriminator_grad(spec, omega, wp, wq)
        omega, state = opt.step(omega, -g, state)
    return omega
