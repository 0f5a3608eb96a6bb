"""Multi-branch depthwise block and its single-kernel re-parameterization.

Training runs n parallel depthwise branches, each a conv followed by its own
sliding-window normalization, and sums the results:

    y = sum_i norm_i(x (*) W_i)

Because every branch is linear in x, same-padded, and normalized with frozen
running stats at inference time, the whole stack collapses into a single
depthwise conv with a per-(timestep, channel) kernel and bias:

    scale_i[t,c] = gamma_i[t,c] / sqrt(var_i[t,c] + eps)
    kernel[t,c]  = sum_i scale_i[t,c] * pad(W_i[c])
    bias[t,c]    = sum_i (beta_i[t,c] - scale_i[t,c] * mu_i[t,c])

``pad`` centers a small kernel inside the common target size, which is where
same padding earns its keep: all branch outputs stay aligned, so summing
kernels is exact. The identity branch is a frozen all-ones 1x1 kernel.

The fusion algebra itself runs in float64 and only then casts to the bank's
storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv2d_dw
from .tensor import Tensor, stack
from .tsbn import TsbnLayer, tsbn_forward_infer, tsbn_forward_train

__all__ = [
    "Branch",
    "BranchBank",
    "FusedConv",
    "pad_kernel",
    "branch_forward",
    "fuse",
    "fused_forward",
    "DEFAULT_BRANCHES",
]

# Two local mixing branches, two pointwise, one identity: the usual
# over-parameterized training-time menu for a 3x3 deploy kernel.
DEFAULT_BRANCHES: tuple = ("identity", 1, 1, 3, 3)


@dataclass
class Branch:
    kind: str  # "identity" or "conv"
    kernel: Tensor  # [C, k, k]; frozen for the identity branch
    norm: TsbnLayer


class BranchBank:
    """Training-time container: n depthwise branches over shared input.

    ``branch_spec`` mixes the string "identity" with odd integer kernel
    sizes, all <= ``target_k``. Kernels are Kaiming-uniform when ``rng`` is
    given, zero otherwise (callers that train always pass an rng; tests often
    set kernels directly).
    """

    def __init__(
        self,
        t_steps: int,
        channels: int,
        window: int | None = None,
        branch_spec=DEFAULT_BRANCHES,
        target_k: int = 3,
        momentum: float = 0.1,
        eps: float = 1e-5,
        dtype=np.float32,
        rng: np.random.Generator | None = None,
    ):
        if target_k % 2 == 0:
            raise ValueError(f"target kernel size must be odd, got {target_k}")
        if not branch_spec:
            raise ValueError("branch_spec must name at least one branch")
        self.t_steps = int(t_steps)
        self.channels = int(channels)
        self.target_k = int(target_k)
        self.dtype = np.dtype(dtype)
        self.branches: list[Branch] = []
        for spec in branch_spec:
            if spec == "identity":
                kernel = Tensor.ones((channels, 1, 1), dtype=self.dtype)
                kind = "identity"
            else:
                k = int(spec)
                if k % 2 == 0 or k < 1:
                    raise ValueError(f"branch kernel sizes must be odd and positive, got {k}")
                if k > target_k:
                    raise ValueError(f"branch kernel {k} exceeds target size {target_k}")
                if rng is None:
                    data = np.zeros((channels, k, k), dtype=self.dtype)
                else:
                    bound = np.sqrt(6.0 / (k * k))
                    data = rng.uniform(-bound, bound, size=(channels, k, k)).astype(self.dtype)
                kernel = Tensor(data, requires_grad=True)
                kind = "conv"
            norm = TsbnLayer(
                t_steps, channels, window=window, momentum=momentum, eps=eps, dtype=self.dtype
            )
            self.branches.append(Branch(kind, kernel, norm))

    @property
    def stats_populated(self) -> bool:
        return all(b.norm.stats_populated for b in self.branches)

    def parameters(self) -> list[Tensor]:
        out = []
        for b in self.branches:
            if b.kind == "conv":
                out.append(b.kernel)
            out.extend(b.norm.affine_parameters())
        return out


@dataclass
class FusedConv:
    """Inference-time result of :func:`fuse`: per-timestep depthwise kernel
    [T, C, K, K] plus bias [T, C]."""

    kernel: Tensor
    bias: Tensor

    @property
    def t_steps(self) -> int:
        return self.kernel.shape[0]

    @property
    def channels(self) -> int:
        return self.kernel.shape[1]


def pad_kernel(kernel: Tensor, target_k: int) -> Tensor:
    """Zero-embed a [C, k, k] kernel at the center of a [C, K, K] field.
    Centering preserves the conv result under same padding."""
    if kernel.ndim != 3:
        raise ValueError(f"expected [C, k, k], got shape {kernel.shape}")
    c, k, k2 = kernel.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    if k % 2 == 0 or target_k % 2 == 0:
        raise ValueError(f"kernel sizes must be odd, got {k} -> {target_k}")
    if k > target_k:
        raise ValueError(f"cannot pad kernel of size {k} down to {target_k}")
    out = np.zeros((c, target_k, target_k), dtype=kernel.dtype)
    off = (target_k - k) // 2
    out[:, off : off + k, off : off + k] = kernel.data
    return Tensor(out)


def _conv_all_steps(x: Tensor, kernel: Tensor) -> Tensor:
    """Apply one shared depthwise kernel across every timestep by folding
    time into the batch axis."""
    t, b, c, h, w = x.shape
    flat = x.reshape(t * b, c, h, w)
    y = conv2d_dw(flat, kernel)
    return y.reshape(t, b, c, h, w)


def branch_forward(x: Tensor, bank: BranchBank, mode: str) -> Tensor:
    """Training-form forward: per-branch conv + norm, summed.

    ``mode`` is "train" (batch stats, buffers update, differentiable) or
    "infer" (running stats, pure).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 5:
        raise ValueError(f"expected [T, B, C, H, W], got shape {x.shape}")
    if x.shape[2] != bank.channels:
        raise ValueError(f"bank built for {bank.channels} channels, input has {x.shape[2]}")
    total = None
    for branch in bank.branches:
        y = _conv_all_steps(x, branch.kernel)
        if mode == "train":
            y = tsbn_forward_train(y, branch.norm)
        else:
            y = tsbn_forward_infer(y, branch.norm)
        total = y if total is None else total + y
    return total


def fuse(bank: BranchBank) -> FusedConv:
    """Collapse the bank into one depthwise conv (see module docstring).

    Requires populated running statistics on every branch; the result is an
    inference-only object whose tensors carry no gradients.
    """
    if not bank.stats_populated:
        raise RuntimeError(
            "cannot fuse: running statistics not populated on every branch; "
            "train at least one batch first"
        )
    t_steps, c, target_k = bank.t_steps, bank.channels, bank.target_k
    kernel = np.zeros((t_steps, c, target_k, target_k), dtype=np.float64)
    bias = np.zeros((t_steps, c), dtype=np.float64)
    for branch in bank.branches:
        norm = branch.norm
        gamma = norm.gamma_values().astype(np.float64)
        beta = norm.beta.data.astype(np.float64)
        mu = norm.running_mu.astype(np.float64)
        var = norm.running_var.astype(np.float64)
        scale = gamma / np.sqrt(var + norm.eps)  # [T, C]
        padded = pad_kernel(branch.kernel, target_k).data.astype(np.float64)  # [C, K, K]
        kernel += scale[:, :, None, None] * padded[None, :, :, :]
        bias += beta - scale * mu
    return FusedConv(
        kernel=Tensor(kernel.astype(bank.dtype)),
        bias=Tensor(bias.astype(bank.dtype)),
    )


def fused_forward(fc: FusedConv, x: Tensor) -> Tensor:
    """Run the fused conv: per-timestep depthwise kernel, then bias."""
    if x.ndim != 5:
        raise ValueError(f"expected [T, B, C, H, W], got shape {x.shape}")
    if x.shape[0] != fc.t_steps:
        raise ValueError(f"fused conv built for {fc.t_steps} steps, input has {x.shape[0]}")
    if x.shape[2] != fc.channels:
        raise ValueError(f"fused conv built for {fc.channels} channels, input has {x.shape[2]}")
    c = fc.channels
    outs = []
    for t in range(fc.t_steps):
        y = conv2d_dw(x[t], fc.kernel[t]) + fc.bias[t].reshape(c, 1, 1)
        outs.append(y)
    return stack(outs, axis=0)
