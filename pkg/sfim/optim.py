"""AdamW with decoupled weight decay, cosine annealing and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from sfim.errors import ConfigError
from sfim.tensor import Tensor


class OptimizerConfig(BaseModel):
    lr_max: float = Field(2e-4, gt=0)
    lr_min: float = Field(1e-7, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    weight_decay: float = Field(0.01, ge=0)
    eps: float = Field(1e-8, gt=0)
    clip_norm: Optional[float] = Field(0.5, gt=0)  # None disables clipping


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamWState":
        return cls(
            step=0,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def copy(self) -> "AdamWState":
        return AdamWState(self.step, {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()})


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.01,
               eps: float = 1e-8) -> AdamWState:
    """One in-place update of ``params``; moments in ``state`` are advanced."""
    if state.step < 0:
        raise ConfigError(f"optimizer step counter must be >= 0, got {state.step}")
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ConfigError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        # decay acts on the parameter, not the gradient
        p.data *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


class AdamW:
    """Holds the hyperparameters and the moment state for a named parameter set."""

    def __init__(self, params: Mapping[str, Tensor], config: Optional[OptimizerConfig] = None,
                 state: Optional[AdamWState] = None):
        self.params = dict(params)
        self.config = config or OptimizerConfig()
        self.state = state if state is not None else AdamWState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> float:
        """Clip (if configured) and apply one update; returns the pre-clip gradient norm."""
        grads = {name: p.grad for name, p in self.params.items()}
        norm = global_grad_norm(grads)
        if self.config.clip_norm is not None:
            clip_grad_norm(grads, self.config.clip_norm, norm)
        c = self.config
        adamw_step(self.params, grads, self.state, lr, c.beta1, c.beta2, c.weight_decay, c.eps)
        return norm


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        return lr_max
    progress = min(max(step, 0), total) / total
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(float(sum(np.vdot(g, g) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float, norm: Optional[float] = None) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = global_grad_norm(grads) if norm is None else norm
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor
    return norm
