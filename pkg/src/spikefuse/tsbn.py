"""Temporal sliding batch normalization.

Activations are [T, B, C, H, W]. At timestep t the layer normalizes x[t]
with per-channel statistics pooled over a window of ``w`` consecutive
timesteps together with the batch and spatial axes, then applies a
per-(timestep, channel) affine:

    y[t] = gamma[t] * (x[t] - mu_win(t)) / sqrt(var_win(t) + eps) + beta[t]

The window always spans exactly ``w`` steps: for t >= w-1 it is the trailing
range [t-w+1, t]; earlier steps borrow the sequence head [0, w-1] so the
width never collapses. Consequences worth relying on:

* ``w == T``  -> every step sees the full sequence; the layer degenerates to
  whole-sequence pooled batch norm (identical stats at every t);
* ``w == 1``  -> per-timestep batch norm.

Variance is biased (population) everywhere, including the running buffers.
Running stats are per (t, c) with momentum updates
``running = (1-momentum)*running + momentum*batch_stat`` and are the only
state training mutates. Inference never mutates and is bit-deterministic.

Layers created with ``positive_gamma=True`` store log(gamma) so the scale is
structurally positive, which downstream threshold folding requires.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, stack

__all__ = [
    "TsbnLayer",
    "window_range",
    "tsbn_window_stats",
    "tsbn_forward_train",
    "tsbn_forward_infer",
    "infer_values64",
]

_STAT_AXES = (0, 1, 3, 4)  # window-time, batch, height, width; channels survive


def window_range(t: int, window: int, t_steps: int) -> tuple[int, int]:
    """Inclusive [lo, hi] window for step ``t``; always ``window`` steps wide."""
    if not 1 <= window <= t_steps:
        raise ValueError(f"window must lie in [1, {t_steps}], got {window}")
    if not 0 <= t < t_steps:
        raise ValueError(f"timestep {t} out of range for {t_steps} steps")
    hi = max(t, window - 1)
    return hi - window + 1, hi


def tsbn_window_stats(x: Tensor, t: int, window: int) -> tuple[Tensor, Tensor]:
    """Per-channel (mean, biased variance) of the window ending at step ``t``.

    Pure readout used by tests and the folding algebra; does not touch the
    tape or any running buffer.
    """
    if x.ndim != 5:
        raise ValueError(f"expected [T, B, C, H, W], got shape {x.shape}")
    lo, hi = window_range(t, window, x.shape[0])
    seg = x.data[lo : hi + 1]
    mu = seg.mean(axis=_STAT_AXES, dtype=np.float64)
    var = seg.var(axis=_STAT_AXES, dtype=np.float64)
    return Tensor(mu.astype(x.dtype)), Tensor(var.astype(x.dtype))


class TsbnLayer:
    """Parameters and running state for one normalization site."""

    def __init__(
        self,
        t_steps: int,
        channels: int,
        window: int | None = None,
        momentum: float = 0.1,
        eps: float = 1e-5,
        positive_gamma: bool = False,
        dtype=np.float32,
    ):
        if t_steps < 1:
            raise ValueError(f"t_steps must be >= 1, got {t_steps}")
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        self.t_steps = int(t_steps)
        self.channels = int(channels)
        self.window = int(window) if window is not None else self.t_steps
        if not 1 <= self.window <= self.t_steps:
            raise ValueError(f"window must lie in [1, {self.t_steps}], got {self.window}")
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {momentum}")
        if eps <= 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.positive_gamma = bool(positive_gamma)
        self.dtype = np.dtype(dtype)

        shape = (self.t_steps, self.channels)
        if positive_gamma:
            # gamma = exp(log_gamma); init log 0 -> gamma 1
            self.log_gamma = Tensor.zeros(shape, dtype=self.dtype, requires_grad=True)
            self.raw_gamma = None
        else:
            self.raw_gamma = Tensor.ones(shape, dtype=self.dtype, requires_grad=True)
            self.log_gamma = None
        self.beta = Tensor.zeros(shape, dtype=self.dtype, requires_grad=True)
        self.running_mu = np.zeros(shape, dtype=self.dtype)
        self.running_var = np.ones(shape, dtype=self.dtype)
        self.batches_seen = 0

    @property
    def stats_populated(self) -> bool:
        return self.batches_seen > 0

    def gamma_tensor(self) -> Tensor:
        """Scale as a tape-connected tensor (one exp per call when stored as
        log); call once per forward."""
        if self.positive_gamma:
            return self.log_gamma.exp()
        return self.raw_gamma

    def gamma_values(self) -> np.ndarray:
        """Scale values without touching the tape."""
        if self.positive_gamma:
            return np.exp(self.log_gamma.data)
        return self.raw_gamma.data

    def affine_parameters(self) -> list[Tensor]:
        first = self.log_gamma if self.positive_gamma else self.raw_gamma
        return [first, self.beta]

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 5:
            raise ValueError(f"expected [T, B, C, H, W], got shape {x.shape}")
        if x.shape[0] != self.t_steps:
            raise ValueError(f"layer built for {self.t_steps} steps, input has {x.shape[0]}")
        if x.shape[2] != self.channels:
            raise ValueError(f"layer built for {self.channels} channels, input has {x.shape[2]}")


def tsbn_forward_train(x: Tensor, layer: TsbnLayer) -> Tensor:
    """Normalize with batch statistics and update the running buffers.

    Differentiable end to end (through the window statistics as well as the
    affine); the running-buffer update uses detached copies of the same batch
    stats the forward consumed.
    """
    layer._check_input(x)
    t_steps, c = layer.t_steps, layer.channels
    gamma = layer.gamma_tensor()
    outs = []
    new_mu = np.empty((t_steps, c), dtype=np.float64)
    new_var = np.empty((t_steps, c), dtype=np.float64)
    for t in range(t_steps):
        lo, hi = window_range(t, layer.window, t_steps)
        win = x[lo : hi + 1]
        mu = win.mean(axis=_STAT_AXES)
        var = win.var(axis=_STAT_AXES)
        denom = (var + layer.eps).sqrt().reshape(c, 1, 1)
        centered = x[t] - mu.reshape(c, 1, 1)
        y = gamma[t].reshape(c, 1, 1) * (centered / denom) + layer.beta[t].reshape(c, 1, 1)
        outs.append(y)
        new_mu[t] = mu.data
        new_var[t] = var.data
    m = layer.momentum
    layer.running_mu = ((1.0 - m) * layer.running_mu + m * new_mu).astype(layer.dtype)
    layer.running_var = ((1.0 - m) * layer.running_var + m * new_var).astype(layer.dtype)
    layer.batches_seen += 1
    return stack(outs, axis=0)


def tsbn_forward_infer(x: Tensor, layer: TsbnLayer) -> Tensor:
    """Normalize with the running statistics. Pure: no buffer mutation, no
    tape, bit-identical across calls. Batch size 1 is fine (no batch stats
    are taken)."""
    layer._check_input(x)
    return Tensor(infer_values64(x.data, layer).astype(x.dtype))


def infer_values64(x_data: np.ndarray, layer: TsbnLayer) -> np.ndarray:
    """Running-stat normalization in float64, before any storage-dtype cast.
    Shared by inference and by the threshold-fold boundary analysis."""
    if not layer.stats_populated:
        raise RuntimeError(
            "running statistics not populated; run at least one training batch "
            "before inference"
        )
    gamma = layer.gamma_values().astype(np.float64)
    beta = layer.beta.data.astype(np.float64)
    mu = layer.running_mu.astype(np.float64)
    denom = np.sqrt(layer.running_var.astype(np.float64) + layer.eps)
    scale = (gamma / denom)[:, None, :, None, None]
    shift = (beta - gamma * mu / denom)[:, None, :, None, None]
    return x_data.astype(np.float64) * scale + shift
