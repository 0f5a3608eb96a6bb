"""Leaky integrate-and-fire neurons with an arctan surrogate gradient.

Dynamics per step (membrane constant ``k_tau``, threshold ``v_th``, reset
potential ``v_reset``):

    charge:  u[t] = v[t-1] + (x[t] - (v[t-1] - v_reset)) / k_tau
    fire:    s[t] = 1 if u[t] >= v_th else 0        (spike at equality)
    reset:   v[t] = u[t] * (1 - s[t]) + v_reset * s[t]   (hard reset)

The comparison is exact and non-differentiable; the backward pass substitutes
the arctan surrogate  alpha / (2 * (1 + ((pi/2) * alpha * (u - v_th))^2)),
whose integral over u is 1. The reset factor uses a detached copy of the
spike so no gradient flows through the reset path. Firing leaves the
membrane at exactly ``v_reset`` (the multiply-by-zero form is float-exact).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _record, stack

__all__ = [
    "LifParams",
    "LifState",
    "lif_step",
    "lif_sequence",
    "heaviside_spike",
    "surrogate_grad",
]


@dataclass(frozen=True)
class LifParams:
    """Neuron constants. Defaults follow common spiking-simulator practice:
    tau 2.0, threshold 1.0, reset 0.0."""

    k_tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    surrogate_alpha: float = 2.0

    def __post_init__(self):
        if self.k_tau < 1.0:
            raise ValueError(f"k_tau must be >= 1 (got {self.k_tau}); 1/k_tau is a leak fraction")
        if not self.v_th > self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")
        if self.surrogate_alpha < 0.0:
            raise ValueError(f"surrogate_alpha must be >= 0, got {self.surrogate_alpha}")


@dataclass
class LifState:
    """Carries the membrane potential between steps."""

    v: Tensor

    @staticmethod
    def fresh(shape, params: LifParams, dtype=np.float32) -> "LifState":
        return LifState(Tensor.full(shape, params.v_reset, dtype=dtype))


def _surrogate(u: np.ndarray, v_th: float, alpha: float) -> np.ndarray:
    z = (math.pi / 2.0) * alpha * (u - v_th)
    return (alpha / 2.0) / (1.0 + z * z)


def surrogate_grad(u: Tensor, params: LifParams) -> Tensor:
    """dS/dU under the arctan surrogate, evaluated elementwise at ``u``."""
    return Tensor(_surrogate(u.data, params.v_th, params.surrogate_alpha))


def heaviside_spike(u: Tensor, v_th: float, alpha: float) -> Tensor:
    """Binary threshold (1 at and above ``v_th``) with surrogate backward."""
    s = (u.data >= v_th).astype(u.dtype)
    ud = u.data

    def bw(g):
        return (g * _surrogate(ud, v_th, alpha),)

    return _record((u,), s, bw)


def lif_step(x_t: Tensor, state: LifState, params: LifParams) -> tuple[Tensor, LifState]:
    """One membrane update. Returns (spikes, next state); both share the
    input's shape. Gradients flow through charge and fire but not reset."""
    if x_t.shape != state.v.shape:
        raise ValueError(f"input shape {x_t.shape} does not match state shape {state.v.shape}")
    v = state.v
    u = v + (x_t - v + params.v_reset) * (1.0 / params.k_tau)
    s = heaviside_spike(u, params.v_th, params.surrogate_alpha)
    s_detached = s.detach()
    v_next = u * (1.0 - s_detached) + s_detached * params.v_reset
    return s, LifState(v_next)


def lif_sequence(x: Tensor, params: LifParams) -> Tensor:
    """Run a fresh neuron over a [T, ...] input; returns spikes of the same
    shape. State starts at ``v_reset`` and is not returned (one sequence, one
    neuron lifetime)."""
    if x.ndim < 1 or x.shape[0] < 1:
        raise ValueError("lif_sequence needs a leading time axis of length >= 1")
    state = LifState.fresh(x.shape[1:], params, dtype=x.dtype)
    spikes = []
    for t in range(x.shape[0]):
        s, state = lif_step(x[t], state, params)
        spikes.append(s)
    return stack(spikes, axis=0)
