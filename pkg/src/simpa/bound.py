"""Generalisation-bound terms: loss clipping, the task-level and
sample-level regularisers R0 and R_i, the confidence split and the assembled
bound."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class BoundConfig:
    delta: float = 0.1
    tau: float = 2.0
    T: int = 2

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.tau > 1.0:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if int(self.T) != self.T or self.T < 2:
            raise ValueError(f"T must be an integer >= 2, got {self.T}")


def clip_loss(x):
    """Clamp to [0, 1]. On a Tensor the gradient is zero outside the range."""
    if isinstance(x, Tensor):
        return x.clip(0.0, 1.0)
    return np.clip(x, 0.0, 1.0) if isinstance(x, np.ndarray) else min(1.0, max(0.0, float(x)))


def r0_constant(cfg: BoundConfig) -> float:
    return math.log(cfg.tau * cfg.T / cfg.delta)


def compute_R0(kl_hyper: float, cfg: BoundConfig) -> float:
    """sqrt((KL_hyper + ln(tau T / delta)) / (2 (T - 1)))."""
    if cfg.T < 2:
        raise ValueError("R0 needs T >= 2")
    return math.sqrt((float(kl_hyper) + r0_constant(cfg)) / (2.0 * (cfg.T - 1)))


def ri_constant(m_v: int, cfg: BoundConfig) -> float:
    return cfg.tau * cfg.T / ((cfg.tau - 1.0) * cfg.delta) * math.log(m_v)


def compute_Ri(expected_task_kl, m_v: int, cfg: BoundConfig):
    """sqrt((E[KL] + tau T / ((tau - 1) delta) ln m_v) / (2 (m_v - 1))).

    Accepts a float or a Tensor (for differentiation). A negative KL
    estimate is clamped to 0 since the true divergence is non-negative.
    """
    if int(m_v) < 2:
        raise ValueError("R_i needs m_v >= 2")
    c = ri_constant(int(m_v), cfg)
    denom = 2.0 * (int(m_v) - 1)
    if isinstance(expected_task_kl, Tensor):
        return ((expected_task_kl.clip(0.0) + c) * (1.0 / denom)).sqrt()
    return math.sqrt((max(float(expected_task_kl), 0.0) + c) / denom)


def split_confidence(cfg: BoundConfig) -> tuple[float, list[float]]:
    """delta0 = delta / tau and delta_i = (tau - 1) delta / (tau T).

    delta0 is taken as the residual, nudged by ulps until the correctly
    rounded fsum of the budget is exactly delta.
    """
    di = (cfg.tau - 1.0) * cfg.delta / (cfg.tau * cfg.T)
    deltas = [di] * int(cfg.T)
    d0 = cfg.delta - math.fsum(deltas)
    for _ in range(64):
        total = math.fsum([d0, *deltas])
        if total == cfg.delta:
            break
        d0 = math.nextafter(d0, -math.inf if total > cfg.delta else math.inf)
    return max(d0, 0.0), deltas


@dataclass
class BoundReport:
    emp_loss: list[float]
    vfe: list[float]
    kl_task: list[float]
    ri: list[float]
    r0: float
    kl_hyper: float
    bound: float
    delta0: float
    delta_i: list[float]
    K: int = 1
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {
            "bound": self.bound,
            "r0": self.r0,
            "ri": list(self.ri),
            "kl_hyper": self.kl_hyper,
            "kl_task": list(self.kl_task),
            "emp_loss": list(self.emp_loss),
            "vfe": list(self.vfe),
            "K": self.K,
            "delta0": self.delta0,
            "delta_i": list(self.delta_i),
        }
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=False, allow_nan=False)


def assemble_bound(
    emp_losses,
    vfes,
    kls,
    kl_hyper: float,
    cfg: BoundConfig,
    m_v: int | list[int],
    K: int = 1,
) -> BoundReport:
    """bound = mean_i(L_i + max(KL_i, 0)) + mean_i R_i + R0.

    Losses and KLs are the per-task values already averaged over the K
    hyper-posterior draws. The report keeps the raw KL estimates.
    """
    emp = [float(x) for x in emp_losses]
    kl = [float(x) for x in kls]
    vf = [float(x) for x in vfes]
    if not (len(emp) == len(kl) == cfg.T) or (vf and len(vf) != cfg.T):
        raise ValueError(f"expected {cfg.T} task records, got losses={len(emp)} kls={len(kl)} vfes={len(vf)}")
    if any(not 0.0 <= x <= 1.0 for x in emp):
        raise ValueError("empirical losses must be clipped to [0, 1]")
    mvs = [int(m_v)] * cfg.T if np.isscalar(m_v) else [int(m) for m in m_v]
    ri = [compute_Ri(k, m, cfg) for k, m in zip(kl, mvs)]
    r0 = compute_R0(kl_hyper, cfg)
    bound = math.fsum(e + max(k, 0.0) for e, k in zip(emp, kl)) / cfg.T + math.fsum(ri) / cfg.T + r0
    d0, di = split_confidence(cfg)
    return BoundReport(emp, vf, kl, ri, r0, float(kl_hyper), bound, d0, di, K)
