"""Spike-driven energy estimation.

The cost model is the usual two-term 45 nm estimate: a multiply-accumulate
costs 4.6 pJ, a pure accumulate 0.9 pJ. Which term applies is decided by
runtime inspection of each layer's input on a probe batch:

* non-binary input (the encoder seeing analog frames, the classifier seeing
  averaged rates)  -> dense MAC count;
* exactly-binary input -> AC count scaled by the measured firing rate, since
  only arriving spikes trigger synaptic work.

Everything arithmetic inside a spike-path unit is AC-priced at the unit's
input rate: synaptic accumulates, normalization affine (2 ops/element),
branch-sum and bias adds. Threshold comparisons and neuron state updates are
free (they are intrinsic to the neuron, not synaptic work). A zero probe
therefore reports zero ACs everywhere, and a fused network can never cost
more ACs than its unfused source on the same input: fusion preserves the
spike trains exactly, so the same rates multiply strictly smaller dense
counts.

Report totals are computed in integer tenths of a pJ (46 and 9 per op) and
divided by ten once, so integer op counts give decimal-exact totals instead
of accumulated float dust.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "E_MAC_PJ",
    "E_AC_PJ",
    "OpCount",
    "EnergyReport",
    "EnergyMeter",
    "count_conv_macs",
    "count_spike_acs",
    "estimate_energy",
    "is_binary",
    "firing_rate",
]

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
PJ_PER_MJ = 10 ** 9  # 1 mJ = 1e-3 J, 1 pJ = 1e-12 J


@dataclass(frozen=True)
class OpCount:
    """Per-sample operation tally for one layer.

    ``firing_rate`` is the mean of the layer's binary input over the probe
    (for analog inputs it degrades to occupancy, the nonzero fraction).
    Spike-driven layers always report ``macs == 0``.
    """

    layer_id: str
    macs: float
    acs: float
    firing_rate: float

    def __post_init__(self):
        if self.macs < 0 or self.acs < 0:
            raise ValueError(f"op counts must be >= 0 ({self.layer_id})")
        if not 0.0 <= self.firing_rate <= 1.0:
            raise ValueError(
                f"firing rate must lie in [0, 1], got {self.firing_rate} ({self.layer_id})"
            )


@dataclass
class EnergyReport:
    counts: list[OpCount] = field(default_factory=list)
    e_mac_pj: float = E_MAC_PJ
    e_ac_pj: float = E_AC_PJ

    @property
    def total_macs(self) -> float:
        return sum(c.macs for c in self.counts)

    @property
    def total_acs(self) -> float:
        return sum(c.acs for c in self.counts)

    def energy_pj(self, macs: float, acs: float) -> float:
        # Integer tenths keep decimal op prices exact (4.6 and 0.9 are not
        # binary-representable; 46 and 9 are).
        mac_tenths = round(self.e_mac_pj * 10)
        ac_tenths = round(self.e_ac_pj * 10)
        return (mac_tenths * macs + ac_tenths * acs) / 10.0

    @property
    def total_pj(self) -> float:
        return self.energy_pj(self.total_macs, self.total_acs)

    @property
    def total_mj(self) -> float:
        return self.total_pj / PJ_PER_MJ

    def layer_pj(self, count: OpCount) -> float:
        return self.energy_pj(count.macs, count.acs)


def count_conv_macs(t_steps: int, c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    """Dense multiply-accumulates of a conv over a full sequence, per sample."""
    for name, v in (("t_steps", t_steps), ("c_in", c_in), ("c_out", c_out),
                    ("k", k), ("h_out", h_out), ("w_out", w_out)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    return t_steps * c_out * c_in * k * k * h_out * w_out


def count_spike_acs(connections_per_step: int, rate: float, t_steps: int) -> float:
    """Accumulates triggered by spikes: rate-scaled synaptic connections per
    step, summed over the sequence."""
    if connections_per_step < 0:
        raise ValueError(f"connections_per_step must be >= 0, got {connections_per_step}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"firing rate must lie in [0, 1], got {rate}")
    if t_steps < 1:
        raise ValueError(f"t_steps must be >= 1, got {t_steps}")
    return rate * connections_per_step * t_steps


def is_binary(arr: np.ndarray) -> bool:
    return bool(np.all((arr == 0.0) | (arr == 1.0)))


def firing_rate(arr: np.ndarray) -> float:
    """Mean spike rate of a binary array; nonzero occupancy otherwise."""
    if arr.size == 0:
        return 0.0
    return float(np.count_nonzero(arr)) / arr.size


class EnergyMeter:
    """Collects per-layer OpCounts while a network runs a probe batch.

    Layers call :meth:`record` with their dense per-sample op geometry; the
    meter decides MAC vs AC by inspecting the input they actually received.
    """

    def __init__(self):
        self._counts: list[OpCount] = []

    def record(self, layer_id: str, inp: np.ndarray, dense_ops_per_step: float,
               t_steps: int) -> None:
        rate = firing_rate(inp)
        if is_binary(inp):
            acs = count_spike_acs(int(round(dense_ops_per_step)), rate, t_steps)
            self._counts.append(OpCount(layer_id, macs=0.0, acs=acs, firing_rate=rate))
        else:
            self._counts.append(
                OpCount(layer_id, macs=float(dense_ops_per_step * t_steps), acs=0.0,
                        firing_rate=rate)
            )

    def record_raw(self, layer_id: str, macs: float, acs: float, rate: float) -> None:
        """For layers whose cost is not a single rate-scaled dense count
        (e.g. the two-operand attention product)."""
        self._counts.append(OpCount(layer_id, macs=macs, acs=acs, firing_rate=rate))

    def report(self) -> EnergyReport:
        return EnergyReport(counts=list(self._counts))


def estimate_energy(net, probe) -> EnergyReport:
    """Run ``net`` on a probe batch with a meter attached and return the
    per-sample energy report. The network must be in an inference mode
    ("infer" or "fused"); training-mode statistics updates would make the
    probe an observer effect."""
    if getattr(net, "mode", None) == "train":
        raise RuntimeError("estimate_energy needs an inference-mode network, not 'train'")
    meter = EnergyMeter()
    net.forward(probe, meter=meter)
    return meter.report()
