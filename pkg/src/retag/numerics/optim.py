"""AdamW: bias-corrected Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class OptimState:
    """Per-parameter first/second moments plus a shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "OptimState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            t=0,
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, Tensor], OptimState]:
    """One update: p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.

    Weight decay is decoupled from the gradient-based step; with wd=0 this is
    exactly Adam. Returns fresh tensors (values are immutable) and advances
    the state counter by one.
    """
    if not lr > 0:
        raise ConfigError(f"adamw: lr must be positive, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError(f"adamw: betas must lie in [0, 1), got {beta1}, {beta2}")
    if not eps > 0:
        raise ConfigError(f"adamw: eps must be positive, got {eps}")

    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    updated: dict[str, Tensor] = {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise DimensionError(f"adamw: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new = p.data - step - lr * weight_decay * p.data
        updated[name] = Tensor._wrap(new.astype(p.data.dtype, copy=False), requires_grad=p.requires_grad)
    state.t = t
    return updated, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm <= 0 or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}, total
