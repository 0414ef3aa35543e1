"""Deterministic MAML-style baseline: a single base network whose weights
are adapted directly by a few gradient steps on the support set.

There is no generator, discriminator or bound. Predictions are point
estimates, read out as a unit-variance Gaussian for regression NLL.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor, gradients, no_grad
from .environments import TaskBatch
from .meta import HALF_LOG_2PI, nll_terms
from .networks import MlpSpec, flatten_grads, mlp_apply, param_blocks
from .optim import Adam, AdamState
from .stochastic import RngStream


@dataclass(frozen=True)
class MamlConfig:
    likelihood: str = "regression"
    T: int = 2
    eta: int = 5
    alpha_t: float = 1e-3
    alpha_v: float = 1e-4
    inner_grad: str = "first"
    iterations: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.eta < 0 or self.iterations < 0:
            raise ValueError("T >= 1, eta >= 0 and iterations >= 0 are required")
        if not (self.alpha_t > 0 and self.alpha_v > 0):
            raise ValueError("learning rates must be positive")
        if self.inner_grad not in ("first", "second"):
            raise ValueError(f"inner_grad must be 'first' or 'second', got {self.inner_grad!r}")


@dataclass
class MamlState:
    theta: np.ndarray
    adam: AdamState
    iteration: int = 0

    def copy(self) -> "MamlState":
        return MamlState(self.theta.copy(), AdamState(self.adam.m.copy(), self.adam.v.copy(), self.adam.t), self.iteration)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"theta": self.theta, "adam.m": self.adam.m, "adam.v": self.adam.v}


def maml_init(spec: MlpSpec, seed: int) -> MamlState:
    theta = spec.init(RngStream(seed, 0, -1, "init/maml").generator())
    return MamlState(theta, AdamState.zeros(theta.size))


def _loss(spec: MlpSpec, likelihood: str, blocks, x, y) -> Tensor:
    out = mlp_apply(spec, blocks, Tensor(x)).reshape(1, len(x), spec.n_out)
    return nll_terms(likelihood, out, y).mean()


def adapt(spec: MlpSpec, cfg: MamlConfig, theta, support: TaskBatch, second_order: bool = False) -> list[Tensor]:
    """eta plain gradient steps at alpha_t on the mean support loss."""
    blocks = param_blocks(spec, theta.copy(), requires_grad=True) if isinstance(theta, np.ndarray) else list(theta)
    lam = blocks
    for _ in range(int(cfg.eta)):
        g = gradients(_loss(spec, cfg.likelihood, lam, support.support_x, support.support_y), lam, create_graph=second_order)
        if second_order:
            lam = [l - g_ * cfg.alpha_t for l, g_ in zip(lam, g)]
        else:
            lam = [Tensor(l.data - cfg.alpha_t * g_.data, requires_grad=True) for l, g_ in zip(lam, g)]
    return lam


def maml_iteration(spec: MlpSpec, cfg: MamlConfig, state: MamlState, sample_task: Callable[[RngStream], TaskBatch]) -> tuple[MamlState, dict]:
    second = cfg.inner_grad == "second"
    grad = np.zeros_like(state.theta)
    losses = []
    for i in range(cfg.T):
        task = sample_task(RngStream(cfg.seed, state.iteration, i, "task"))
        theta_blocks = param_blocks(spec, state.theta.copy(), requires_grad=True)
        lam = adapt(spec, cfg, theta_blocks, task, second)
        q = _loss(spec, cfg.likelihood, lam, task.query_x, task.query_y)
        roots = theta_blocks if second else lam
        grad += flatten_grads(gradients(q, roots)) / cfg.T
        losses.append(q.item())
    theta, adam = Adam(cfg.alpha_v).step(state.theta, grad, state.adam)
    return MamlState(theta, adam, state.iteration + 1), {"iteration": state.iteration, "query_loss": float(np.mean(losses))}


def maml_train_iter(spec: MlpSpec, cfg: MamlConfig, sample_task, state: MamlState | None = None, iterations: int | None = None) -> Iterator[tuple[MamlState, dict]]:
    state = maml_init(spec, cfg.seed) if state is None else state
    total = cfg.iterations if iterations is None else iterations
    while state.iteration < total:
        state, rec = maml_iteration(spec, cfg, state, sample_task)
        yield state, rec


def maml_train(spec: MlpSpec, cfg: MamlConfig, sample_task, state: MamlState | None = None, iterations: int | None = None):
    state = maml_init(spec, cfg.seed) if state is None else state
    log = []
    for state, rec in maml_train_iter(spec, cfg, sample_task, state, iterations):
        log.append(rec)
    return state, log


@dataclass
class PointPredictive:
    """A point-mass predictive: a single sample per point."""

    likelihood: str
    values: np.ndarray  # (m,) regression means or (m, N) class probabilities

    @property
    def samples(self) -> np.ndarray:
        return self.values[None, ...]

    @property
    def mean(self) -> np.ndarray:
        return self.values

    @property
    def std(self) -> np.ndarray:
        return np.zeros(self.values.shape[:1])

    @property
    def probs(self) -> np.ndarray:
        return self.values

    def nll(self, y) -> float:
        y = np.asarray(y)
        if self.likelihood == "regression":
            r = self.values - y.ravel()
            return float(np.mean(0.5 * r * r) + HALF_LOG_2PI)
        p = self.values[np.arange(len(y)), y.astype(np.int64)]
        with np.errstate(divide="ignore"):
            return float(-np.log(p).mean())


def maml_predict(spec: MlpSpec, cfg: MamlConfig, state: MamlState, support: TaskBatch, x_query, adapt_steps: bool = True) -> PointPredictive:
    blocks = adapt(spec, cfg, state.theta, support) if adapt_steps and cfg.eta > 0 else param_blocks(spec, state.theta, False)
    with no_grad():
        out = mlp_apply(spec, [Tensor(b.data) for b in blocks], Tensor(np.asarray(x_query, dtype=np.float64))).data
    if cfg.likelihood == "regression":
        return PointPredictive("regression", out[:, 0])
    e = np.exp(out - out.max(axis=1, keepdims=True))
    return PointPredictive("classification", e / e.sum(axis=1, keepdims=True))
