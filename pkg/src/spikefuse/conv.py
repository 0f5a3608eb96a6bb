"""Same-padded 2-D convolutions with tape backward rules.

``conv2d_dw`` is depthwise: one k*k filter per channel, no channel mixing,
stride 1. ``conv2d`` is the standard cross-correlation over channels with
stride 1 or 2. Both zero-pad by (k-1)/2 so stride-1 output keeps the input's
spatial extent, which is the alignment property the branch-fusion algebra
relies on. Accumulation is float64 regardless of storage dtype; a depthwise
convolution with the 1x1 identity kernel reproduces its input bit for bit.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _record

__all__ = ["conv2d", "conv2d_dw"]


def _check_odd(k: int) -> None:
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd for same padding, got {k}")


def conv2d_dw(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise convolution. ``x`` is [B, C, H, W], ``kernel`` is [C, k, k]."""
    if x.ndim != 4:
        raise ValueError(f"conv2d_dw expects [B, C, H, W] input, got shape {x.shape}")
    if kernel.ndim != 3:
        raise ValueError(f"conv2d_dw expects [C, k, k] kernel, got shape {kernel.shape}")
    b, c, h, w = x.shape
    kc, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    _check_odd(kh)
    if kc != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel has {kc}")
    k = kh
    pad = (k - 1) // 2
    out_dtype = np.result_type(x.dtype, kernel.dtype)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))).astype(np.float64, copy=False)
    kd = kernel.data.astype(np.float64, copy=False)
    acc = np.zeros((b, c, h, w), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            acc += kd[:, u, v][:, None, None] * xp[:, :, u : u + h, v : v + w]

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        dx = dk = None
        if need_k:
            dk = np.empty((c, k, k), dtype=np.float64)
            for u in range(k):
                for v in range(k):
                    dk[:, u, v] = (g64 * xp[:, :, u : u + h, v : v + w]).sum(axis=(0, 2, 3))
            dk = dk.astype(kernel.dtype, copy=False)
        if need_x:
            gp = np.pad(g64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            flipped = kd[:, ::-1, ::-1]
            dxa = np.zeros((b, c, h, w), dtype=np.float64)
            for u in range(k):
                for v in range(k):
                    dxa += flipped[:, u, v][:, None, None] * gp[:, :, u : u + h, v : v + w]
            dx = dxa.astype(x.dtype, copy=False)
        return (dx, dk)

    return _record((x, kernel), acc.astype(out_dtype), bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Channel-mixing convolution. ``x`` is [B, Cin, H, W], ``kernel`` is
    [Cout, Cin, k, k], ``stride`` is 1 or 2."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects [B, Cin, H, W] input, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d expects [Cout, Cin, k, k] kernel, got shape {kernel.shape}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    _check_odd(kh)
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {kcin}")
    if kh == 1:
        return _conv1x1(x, kernel, stride)
    k = kh
    pad = (k - 1) // 2
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    out_dtype = np.result_type(x.dtype, kernel.dtype)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))).astype(np.float64, copy=False)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B, Cin, Ho, Wo, k, k]
    k64 = kernel.data.astype(np.float64, copy=False)
    out = np.einsum("bcijuv,ocuv->boij", windows, k64, optimize=True)

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        dx = dk = None
        if need_k:
            dk = np.einsum("boij,bcijuv->ocuv", g64, windows, optimize=True)
            dk = dk.astype(kernel.dtype, copy=False)
        if need_x:
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    patch = np.einsum("boij,oc->bcij", g64, k64[:, :, u, v], optimize=True)
                    dxp[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride] += patch
            dx = dxp[:, :, pad : pad + h, pad : pad + w].astype(x.dtype, copy=False)
        return (dx, dk)

    return _record((x, kernel), out.astype(out_dtype), bw)


def _conv1x1(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    # Pointwise convolution is a channel matmul; route it through BLAS.
    b, cin, h, w = x.shape
    cout = kernel.shape[0]
    xd = x.data[:, :, ::stride, ::stride]
    h_out, w_out = xd.shape[2], xd.shape[3]
    out_dtype = np.result_type(x.dtype, kernel.dtype)
    x64 = xd.astype(np.float64, copy=False)
    wmat = kernel.data.reshape(cout, cin).astype(np.float64, copy=False)
    flat = x64.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = (flat @ wmat.T).reshape(b, h_out, w_out, cout).transpose(0, 3, 1, 2)

    need_x, need_k = x.requires_grad, kernel.requires_grad

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        gflat = g64.transpose(0, 2, 3, 1).reshape(-1, cout)
        dx = dk = None
        if need_k:
            dk = (gflat.T @ flat).reshape(cout, cin, 1, 1).astype(kernel.dtype, copy=False)
        if need_x:
            dxs = (gflat @ wmat).reshape(b, h_out, w_out, cin).transpose(0, 3, 1, 2)
            if stride == 1:
                dx = dxs
            else:
                dx = np.zeros(x.shape, dtype=np.float64)
                dx[:, :, ::stride, ::stride] = dxs
            dx = dx.astype(x.dtype, copy=False)
        return (dx, dk)

    return _record((x, kernel), out.astype(out_dtype), bw)
