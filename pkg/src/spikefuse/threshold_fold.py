"""Folding a normalization layer into the spike threshold.

A stateless spike unit fires where the normalized value reaches the
threshold:

    gamma*(x - mu)/sqrt(var + eps) + beta  >=  v_th

For gamma > 0 the comparison can be rearranged onto the raw input:

    x  >=  (v_th - beta) * sqrt(var + eps) / gamma + mu

so inference needs one comparison per element and no normalization
arithmetic at all. ``eps`` stays inside the square root on purpose: that
makes the folded comparison the exact mirror of the normalized one rather
than an approximation that drifts when var is tiny.

The rearrangement flips direction where gamma < 0 and dies where gamma == 0,
so folding demands strictly positive gamma and reports the first offending
(t, c) otherwise. Fold constants are computed and held in float64; in 32-bit
pipelines the two paths can still disagree on elements whose normalized
distance to the threshold is below ~1e-6 (storage rounding), which is why
equivalence checks carry a boundary band of that width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor
from .tsbn import TsbnLayer, infer_values64, tsbn_forward_infer

__all__ = [
    "FoldedThreshold",
    "fold_threshold",
    "spike_normalized",
    "spike_folded",
    "boundary_distance",
]


@dataclass(frozen=True)
class FoldedThreshold:
    """Per-(timestep, channel) effective thresholds plus provenance.

    ``source`` names the layer the constants were folded from, so a
    checkpoint audit can match folded units back to their origin.
    """

    v_th_eff: Tensor  # [T, C], float64 in memory
    v_th: float = 1.0
    source: str = ""

    @property
    def t_steps(self) -> int:
        return self.v_th_eff.shape[0]

    @property
    def channels(self) -> int:
        return self.v_th_eff.shape[1]


def fold_threshold(layer: TsbnLayer, v_th: float, source: str = "") -> FoldedThreshold:
    """Build the folded thresholds for ``layer``. Fails if running stats are
    missing or any gamma is not strictly positive."""
    if not layer.stats_populated:
        raise RuntimeError(
            "cannot fold thresholds: running statistics not populated; "
            "train at least one batch first"
        )
    gamma = layer.gamma_values().astype(np.float64)
    bad = np.argwhere(gamma <= 0.0)
    if bad.size:
        t, c = (int(v) for v in bad[0])
        raise ValueError(
            f"threshold folding needs gamma > 0; gamma[t={t}, c={c}] = {gamma[t, c]!r} "
            f"in layer {source or '<unnamed>'}"
        )
    beta = layer.beta.data.astype(np.float64)
    mu = layer.running_mu.astype(np.float64)
    var = layer.running_var.astype(np.float64)
    eff = (v_th - beta) * np.sqrt(var + layer.eps) / gamma + mu
    return FoldedThreshold(v_th_eff=Tensor(eff, dtype=np.float64), v_th=float(v_th), source=source)


def spike_normalized(x: Tensor, layer: TsbnLayer, v_th: float) -> Tensor:
    """Reference inference path: normalize with running stats, then compare
    against ``v_th`` (spike at equality)."""
    y = tsbn_forward_infer(x, layer)
    return Tensor((y.data >= v_th).astype(x.dtype))


def spike_folded(x: Tensor, folded: FoldedThreshold) -> Tensor:
    """Folded inference path: compare raw input against the effective
    thresholds. Comparisons only; no arithmetic on x."""
    if x.ndim != 5:
        raise ValueError(f"expected [T, B, C, H, W], got shape {x.shape}")
    if x.shape[0] != folded.t_steps or x.shape[2] != folded.channels:
        raise ValueError(
            f"folded thresholds are [{folded.t_steps}, {folded.channels}], "
            f"input is {x.shape}"
        )
    eff = folded.v_th_eff.data[:, None, :, None, None]
    return Tensor((x.data >= eff).astype(x.dtype))


def boundary_distance(x: Tensor, layer: TsbnLayer, v_th: float) -> np.ndarray:
    """|normalized value - v_th| in float64, the yardstick for the boundary
    band: elements closer than the band width may legitimately differ
    between the normalized and folded paths in 32-bit storage."""
    return np.abs(infer_values64(x.data, layer) - v_th)
