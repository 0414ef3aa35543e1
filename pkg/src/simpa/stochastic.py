"""Random streams, reparameterised latent-noise sampling and the
diagonal-Gaussian hyper-posterior over generator parameters."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from .autodiff import Function, Tensor

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Identifies one independent random stream.

    The generator is keyed on ``(seed, iteration, task, purpose)`` through a
    ``SeedSequence`` feeding a Philox counter-based bit generator, so the same
    id always reproduces the same numbers and the order in which streams are
    consumed does not matter.
    """

    seed: int
    iteration: int = 0
    task: int = -1
    purpose: str = ""

    def child(self, **changes) -> "RngStream":
        return replace(self, **changes)

    def generator(self) -> np.random.Generator:
        seed = int(self.seed) & _U64
        entropy = [
            seed & 0xFFFFFFFF,
            seed >> 32,
            int(self.iteration) & 0xFFFFFFFF,
            (int(self.task) + 1) & 0xFFFFFFFF,
            zlib.crc32(self.purpose.encode("utf-8")),
        ]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class LatentNoiseParams:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError("alpha and beta must have the same shape")
        if not (np.all(a > 0) and np.all(b > 0)):
            raise ValueError("Beta concentrations must be positive")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)


# smallest concentration accepted by the sampler; the encoder floors at 1e-4
MIN_CONCENTRATION = 1e-6
_Z_EDGE = 1e-12


def beta_sample_grads(a: np.ndarray, b: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Implicit reparameterisation gradients dz/da and dz/db.

    From F(z; a, b) = u held fixed: dz/da = -(dF/da) / f(z). dF/da has no
    closed form, so it is taken by central differences of the regularised
    incomplete beta function (relative accuracy around 1e-10).
    """
    a = np.broadcast_to(a, z.shape)
    b = np.broadcast_to(b, z.shape)
    ha = 1e-6 * np.maximum(a, 1.0)
    hb = 1e-6 * np.maximum(b, 1.0)
    dF_da = (special.betainc(a + ha, b, z) - special.betainc(np.maximum(a - ha, 0.5 * a), b, z)) / (
        a + ha - np.maximum(a - ha, 0.5 * a)
    )
    dF_db = (special.betainc(a, b + hb, z) - special.betainc(a, np.maximum(b - hb, 0.5 * b), z)) / (
        b + hb - np.maximum(b - hb, 0.5 * b)
    )
    log_pdf = (a - 1.0) * np.log(z) + (b - 1.0) * np.log1p(-z) - special.betaln(a, b)
    pdf = np.exp(log_pdf)
    with np.errstate(divide="ignore", invalid="ignore"):
        dz_da = np.where(pdf > 0, -dF_da / pdf, 0.0)
        dz_db = np.where(pdf > 0, -dF_db / pdf, 0.0)
    dz_da[~np.isfinite(dz_da)] = 0.0
    dz_db[~np.isfinite(dz_db)] = 0.0
    return dz_da, dz_db


class _BetaSample(Function):
    """Samples drawn outside the graph; backward applies the implicit
    reparameterisation gradient (treated as constant for higher orders)."""

    def forward(self, a, b):
        return self.z

    def backward(self, g):
        a, b = self.inputs
        dz_da, dz_db = beta_sample_grads(a.data, b.data, self.z)
        return (g * dz_da).sum(axis=0), (g * dz_db).sum(axis=0)


def sample_beta(alpha, beta, n: int, rng) -> Tensor:
    """Draw ``n`` rows of Z independent Beta(alpha_j, beta_j) variables.

    Sampling is by inversion, z = F^{-1}(u; alpha, beta) with u uniform, so a
    fixed stream gives sample paths that are smooth in the concentrations
    and whose derivative is exactly the implicit gradient.
    ``alpha``/``beta`` may be Tensors carrying gradient (e.g. encoder
    outputs); the result then has a pathwise gradient with respect to them.
    """
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    if alpha.shape != beta.shape or alpha.ndim != 1:
        raise ValueError("alpha and beta must be matching 1-D vectors")
    if np.any(alpha.data < MIN_CONCENTRATION) or np.any(beta.data < MIN_CONCENTRATION):
        raise ValueError("Beta concentration underflow")
    gen = as_generator(rng)
    u = gen.random((int(n), alpha.shape[0]))
    z = special.betaincinv(alpha.data, beta.data, u)
    z = np.clip(z, _Z_EDGE, 1.0 - _Z_EDGE)
    return _BetaSample.apply(alpha, beta, z=z)


def sample_gaussian_noise(mean, std, n: int, rng) -> Tensor:
    """Reparameterised diagonal Gaussian latent noise: mean + std * eps."""
    mean = mean if isinstance(mean, Tensor) else Tensor(mean)
    std = std if isinstance(std, Tensor) else Tensor(std)
    eps = as_generator(rng).standard_normal((int(n), mean.shape[0]))
    return mean + std * eps


@dataclass
class HyperPosterior:
    """q(theta; psi) = N(psi, sigma_theta^2 I) with prior N(mu0 1, sigma0^2 I)."""

    psi: np.ndarray
    sigma_theta: float
    prior_mu0: float = 0.0
    prior_sigma0: float = 10.0

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        if not self.sigma_theta > 0:
            raise ValueError("sigma_theta must be positive")
        if not self.prior_sigma0 > 0:
            raise ValueError("prior_sigma0 must be positive")


def sample_theta(h: HyperPosterior, rng) -> np.ndarray:
    """theta = psi + sigma_theta * eps; d theta / d psi is the identity."""
    eps = as_generator(rng).standard_normal(h.psi.shape)
    return h.psi + h.sigma_theta * eps


def gaussian_kl(h: HyperPosterior) -> float:
    """KL[N(psi, s^2 I) || N(mu0 1, s0^2 I)] in closed form."""
    s, s0 = float(h.sigma_theta), float(h.prior_sigma0)
    d = h.psi.size
    quad = float(np.sum((h.psi - h.prior_mu0) ** 2))
    return d * (np.log(s0 / s) + s * s / (2 * s0 * s0) - 0.5) + quad / (2 * s0 * s0)


def gaussian_kl_grad(h: HyperPosterior) -> np.ndarray:
    return (h.psi - h.prior_mu0) / (h.prior_sigma0 ** 2)
