"""Differentiable layer primitives on NHWC tensors."""

from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np

from .tensor import Tensor, make

Pair = Union[int, Tuple[int, int]]


def _pair(v: Pair) -> Tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError(f"kernel {kernel} larger than padded input {size + 2 * pad}")
    if span % stride:
        raise ValueError(
            f"non-integral output size: ({size} + 2*{pad} - {kernel}) / {stride} is not whole"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: Pair = 1,
    padding: Pair = 0,
) -> Tensor:
    """Cross-correlate ``x`` (N, H, W, Cin) with ``weight`` (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, h, w, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output maps")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("strides must be >= 1")
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::sh, ::sw, :]).reshape(-1, cin)
    else:
        # explicit im2col, one contiguous copy per kernel offset
        cols = np.empty((n, oh, ow, kh, kw, cin))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :]
        cols = cols.reshape(-1, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, oh, ow, cout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        if weight.requires_grad:
            weight._accumulate((cols.T @ g2).reshape(kh, kw, cin, cout))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] += gcols[:, :, :, i, j, :]
            x._accumulate(gxp[:, ph:ph + h, pw:pw + w, :])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: Pair, stride: Optional[Pair] = None) -> Tensor:
    """Max pooling without padding; a trailing remainder that does not fill a window is dropped.

    The backward pass routes each window's gradient to the first maximal entry
    in row-major scan order.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    n, h, w, c = x.shape
    if kh > h or kw > w:
        raise ValueError(f"pooling window {kh}x{kw} larger than input {h}x{w}")
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = None
    arg = np.zeros((n, oh, ow, c), dtype=np.int64)
    for idx in range(kh * kw):
        i, j = divmod(idx, kw)
        val = x.data[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :]
        if out is None:
            out = val.copy()
            continue
        better = val > out  # strict, so ties keep the earlier offset
        out = np.where(better, val, out)
        arg[better] = idx

    def backward(g):
        gx = np.zeros(x.shape)
        for idx in range(kh * kw):
            i, j = divmod(idx, kw)
            hit = np.where(arg == idx, g, 0.0)
            gx[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw, :] += hit
        x._accumulate(gx)

    return make(out, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Average every feature map over its spatial extent: (N, H, W, C) -> (N, C)."""
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy())

    return make(out, (x,), backward, "global_avg_pool")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over every axis except the last.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in common frameworks).
    """
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in axes]))
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = (inv_std / m) * (
                    m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes)
                )
            else:
                gx = gxhat * inv_std
            x._accumulate(gx)

    return make(out, (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        logits._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return make(p, (logits,), backward, "softmax")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out
