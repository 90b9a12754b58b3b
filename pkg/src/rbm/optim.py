"""Adagrad / Adam with global gradient-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tensor


@dataclass
class OptimizerState:
    mode: str = "adagrad"
    lr: float = 0.1
    max_norm: float = 2.0
    initial_accumulator: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("adagrad", "adam"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.initial_accumulator <= 0:
            raise ValueError("Adagrad initial accumulator must be positive")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns the clipped gradients and the norm measured before clipping.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def optimizer_step(state: OptimizerState, params: dict[str, Tensor],
                   grads: dict[str, np.ndarray]) -> float:
    """Clip, then apply one Adagrad or Adam update in place. Returns the pre-clip norm.

    Parameters absent from ``grads`` receive a zero gradient. A non-finite
    gradient aborts the step before any parameter is touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if name in params and g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    clipped, norm = clip_by_global_norm(grads, state.max_norm)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = clipped.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if state.mode == "adagrad":
            acc = state.accumulators.get(name)
            if acc is None:
                acc = np.full_like(p.data, state.initial_accumulator)
            acc = acc + g * g
            state.accumulators[name] = acc
            p.data = p.data - state.lr * g / np.sqrt(acc)
        else:
            m = state.first_moments.get(name, np.zeros_like(p.data))
            v = state.second_moments.get(name, np.zeros_like(p.data))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.first_moments[name] = m
            state.second_moments[name] = v
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return norm
