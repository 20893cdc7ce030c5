"""Channel-last convolutions (cross-correlation) with zero padding.

Layouts: 1-D input [B, T, C_in] with weight [k, C_in, C_out];
2-D input [B, H, W, C_in] with weight [kh, kw, C_in, C_out].
The forward pass gathers every receptive field into one column matrix and
does a single matmul; the input gradient scatters columns back per kernel offset.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, concat, mul, sigmoid, tanh


# largest im2col buffer (in values) built at once
_COLS_LIMIT = 1 << 24


def out_extent(n: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _as_tuple(v, n):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * n


def conv(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    dilation=1,
    padding=0,
) -> Tensor:
    """N-d convolution over the spatial axes between batch and channel."""
    nsp = weight.ndim - 2
    if x.ndim != nsp + 2:
        raise ValueError(f"conv: input rank {x.ndim} does not match a {nsp}-d kernel")
    ksize = weight.shape[:nsp]
    cin, cout = weight.shape[nsp], weight.shape[nsp + 1]
    if x.shape[-1] != cin:
        raise ValueError(f"conv: input has {x.shape[-1]} channels, kernel expects {cin}")
    stride, dilation, padding = (_as_tuple(v, nsp) for v in (stride, dilation, padding))
    if min(ksize) < 1 or min(stride) < 1 or min(dilation) < 1:
        raise ValueError("conv: kernel, stride and dilation must be >= 1")
    spatial = x.shape[1:-1]
    outs = tuple(out_extent(n, k, s, d, p) for n, k, s, d, p in zip(spatial, ksize, stride, dilation, padding))
    if min(outs) < 1:
        raise ValueError(f"conv: output extent {outs} < 1 for input {spatial}")

    xd = x.data
    if any(padding):
        xp = np.pad(xd, [(0, 0)] + [(p, p) for p in padding] + [(0, 0)])
    else:
        xp = xd
    wd = weight.data
    spatial_axes = tuple(range(1, nsp + 1))
    # windows [B, out..., C, k...] subsampled by stride (outputs) and dilation (taps)
    span = [(k - 1) * d + 1 for k, d in zip(ksize, dilation)]
    win = sliding_window_view(xp, span, axis=spatial_axes)
    sel = (slice(None),) + tuple(slice(None, s * (n - 1) + 1, s) for s, n in zip(stride, outs)) + (slice(None),)
    sel += tuple(slice(None, None, d) for d in dilation)
    win = win[sel]
    order = (0,) + spatial_axes + tuple(range(nsp + 2, 2 * nsp + 2)) + (nsp + 1,)
    kc = int(np.prod(ksize)) * cin
    w2 = wd.reshape(kc, cout)
    batch = xd.shape[0]
    # bound the column buffer by splitting the first output axis into chunks
    per_row = batch * int(np.prod(outs[1:])) * kc
    step = max(1, min(outs[0], _COLS_LIMIT // max(per_row, 1)))
    chunks = [(lo, min(lo + step, outs[0])) for lo in range(0, outs[0], step)]

    def columns(lo, hi):
        return np.ascontiguousarray(win[:, lo:hi].transpose(order)).reshape(-1, kc)

    y = np.empty((batch,) + outs + (cout,), dtype=xd.dtype)
    kept = None
    for lo, hi in chunks:
        cols = columns(lo, hi)
        y[:, lo:hi] = (cols @ w2).reshape((batch, hi - lo) + outs[1:] + (cout,))
        if len(chunks) == 1:
            kept = cols
    if bias is not None:
        y += bias.data
    offsets = list(itertools.product(*(range(k) for k in ksize)))

    def back(g):
        gw = np.zeros((kc, cout), dtype=wd.dtype) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for lo, hi in chunks:
            gc = g[:, lo:hi].reshape(-1, cout)
            if gw is not None:
                gw += (kept if kept is not None else columns(lo, hi)).T @ gc
            if gxp is None:
                continue
            gcols = (gc @ w2.T).reshape((batch, hi - lo) + outs[1:] + tuple(ksize) + (cin,))
            for off in offsets:
                dst = (slice(None),) + tuple(
                    slice(o * d + s * first, o * d + s * (first + n - 1) + 1, s)
                    for o, d, s, first, n in zip(off, dilation, stride, (lo,) + (0,) * (nsp - 1), (hi - lo,) + outs[1:])
                ) + (slice(None),)
                gxp[dst] += gcols[(slice(None),) * (nsp + 1) + off]
        gx = None
        if gxp is not None:
            gx = gxp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, spatial))] if any(padding) else gxp
        grads = [gx, gw.reshape(wd.shape) if gw is not None else None]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(y, parents, back)


def gated_conv2d(x: Tensor, feature_params: tuple, gate_params: tuple, padding=0) -> Tensor:
    """tanh(conv_f(x)) * sigmoid(conv_g(x)); each params tuple is (weight, bias)."""
    wf, bf = feature_params
    wg, bg = gate_params
    if wf.shape != wg.shape:
        raise ValueError(f"gated_conv2d: feature kernel {wf.shape} != gate kernel {wg.shape}")
    c = wf.shape[-1]
    # one conv with both kernels side by side; split channels afterwards
    both = conv(x, concat([wf, wg], axis=-1), concat([bf, bg], axis=-1), padding=padding)
    return mul(tanh(both[..., :c]), sigmoid(both[..., c:]))
