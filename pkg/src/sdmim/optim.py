"""Decoupled-weight-decay adaptive optimizer and the warmup/cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .config import RunConfig
from .errors import ContractError
from .model import decays


@dataclass
class Schedule:
    base_lr: float = 8e-4
    warmup_epochs: int = 10
    total_epochs: int = 100
    min_lr: float = 0.0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Schedule":
        return cls(cfg.base_lr, cfg.warmup_epochs, cfg.total_epochs, cfg.min_lr)


def lr_at(schedule: Schedule, epoch: float) -> float:
    """Linear ramp to base_lr over warmup, then half-cosine down to 0,
    floored at min_lr. Continuous at the warmup boundary."""
    if epoch < schedule.warmup_epochs:
        lr = schedule.base_lr * epoch / schedule.warmup_epochs
    else:
        span = schedule.total_epochs - schedule.warmup_epochs
        tau = (epoch - schedule.warmup_epochs) / span
        lr = schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * tau))
    return max(lr, schedule.min_lr)


@dataclass
class OptimizerState:
    """First/second moment estimates per parameter plus the step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "OptimizerState":
        return cls(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def clip_gradients(named: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for _, p in named:
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for _, p in named:
            if p.grad is not None:
                p.grad *= scale
    return norm


def adamw_step(named: list[tuple[str, Tensor]], state: OptimizerState, lr: float):
    """One update: moment tracking with bias correction, decoupled decay.

    Decay is skipped for norm gains, biases, the mask token, and
    positional embeddings (anything that is not a weight matrix).
    """
    for name, p in named:
        if p.grad is None:
            raise ContractError(f"adamw_step: parameter '{name}' has no gradient")
    state.t += 1
    t = state.t
    # python-float scalars: arrays keep their own dtype (f32 in training,
    # f64 when a test drives the recursion at oracle precision)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if decays(name) and state.weight_decay > 0:
            update = update + (lr * state.weight_decay) * p.data
        p.data -= update


__all__ = ["Schedule", "lr_at", "OptimizerState", "clip_gradients", "adamw_step"]
