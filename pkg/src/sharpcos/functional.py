"""Stateless layer operations on NCHW tensors.

The convolution-like ops (``conv2d``, ``scs2d``, ``cossim2d``, ``sdp2d``) all
share one im2col view of the input: rows are output positions, columns are the
flattened ``(C, kh, kw)`` patch, so every variant reduces to a single matrix
product against the ``(out_channels, C*kh*kw)`` kernel matrix followed by
elementwise post-processing.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, as_tensor

# Floor for kernel norms and for (patch norm + q) in the cosine denominators.
NORM_FLOOR = 1e-12


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :oh, :ow]


def im2col(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> tuple[Tensor, int, int]:
    """Unfold ``x`` (N, C, H, W) into a (N*OH*OW, C*kh*kw) patch matrix.

    Returns the matrix and the output spatial size. Each row reproduces one
    (zero-padded) input window in ``(C, kh, kw)`` order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{w} (padding {padding}) smaller than kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride, oh, ow)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)

    def backward(g):
        g6 = g.reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return T._node(cols, (x,), "im2col", backward), oh, ow


def _unfold(x, weight, stride, padding):
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4:
        raise ShapeError(f"expected (O, C, kh, kw) weights, got {weight.shape}")
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} does not match weights {weight.shape}")
    o, _, kh, kw = weight.shape
    cols, oh, ow = im2col(x, kh, kw, stride, padding)
    wmat = weight.reshape(o, -1)
    return cols, wmat, oh, ow


def _to_nchw(rows: Tensor, n: int, oh: int, ow: int) -> Tensor:
    return rows.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided cross-correlation plus optional per-channel bias."""
    cols, wmat, oh, ow = _unfold(x, weight, stride, padding)
    out = cols @ wmat.T
    if bias is not None:
        out = out + as_tensor(bias).reshape(1, -1)
    return _to_nchw(out, x.shape[0], oh, ow)


def _cosine_rows(cols: Tensor, wmat: Tensor, q) -> Tensor:
    dot = cols @ wmat.T
    patch_norm = T.l2norm(cols, axis=1, keepdims=True)
    kernel_norm = T.maximum(T.l2norm(wmat, axis=1), NORM_FLOOR).reshape(1, -1)
    denom = T.maximum(patch_norm + q, NORM_FLOOR) * kernel_norm
    # rounding can push |u| a few ulp past 1 when the patch is parallel to the kernel
    return T.clip(dot / denom, -1.0, 1.0)


def scs2d(x, weight, p, q, stride: int = 1, padding: int = 0) -> Tensor:
    """Sharpened cosine similarity between every patch and every kernel.

    ``u = (s . k) / ((|s| + q) |k|)`` and the output is ``sign(u) |u|^p``,
    with ``p`` broadcast per output channel.
    """
    cols, wmat, oh, ow = _unfold(x, weight, stride, padding)
    u = _cosine_rows(cols, wmat, q)
    p = as_tensor(p, dtype=u.dtype)
    return _to_nchw(T.signed_pow(u, p.reshape(1, -1) if p.ndim else p), x.shape[0], oh, ow)


def cossim2d(x, weight, q, stride: int = 1, padding: int = 0) -> Tensor:
    """Unsharpened cosine similarity; equal to ``scs2d`` with ``p = 1``."""
    cols, wmat, oh, ow = _unfold(x, weight, stride, padding)
    return _to_nchw(_cosine_rows(cols, wmat, q), x.shape[0], oh, ow)


def sdp2d(x, weight, p, stride: int = 1, padding: int = 0) -> Tensor:
    """Sharpened strided dot product ``sign(s . k) |s . k|^p`` (no normalisation)."""
    cols, wmat, oh, ow = _unfold(x, weight, stride, padding)
    dot = cols @ wmat.T
    p = as_tensor(p, dtype=dot.dtype)
    return _to_nchw(T.signed_pow(dot, p.reshape(1, -1) if p.ndim else p), x.shape[0], oh, ow)


def _pool(x, window: int, stride: int | None, by_abs: bool) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    oh, ow = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{w} smaller than pooling window {window}")
    win = _windows(x.data, window, window, stride, oh, ow).reshape(n, c, oh, ow, window * window)
    # np.argmax returns the first maximum, i.e. the first in row-major window order
    idx = np.argmax(np.abs(win) if by_abs else win, axis=-1)
    vals = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        ni, ci, oi, oj = np.indices(idx.shape, sparse=True)
        rows = oi * stride + idx // window
        cols = oj * stride + idx % window
        dx = np.zeros_like(x.data)
        if stride >= window:
            dx[ni, ci, rows, cols] = g
        else:
            np.add.at(dx, (ni, ci, rows, cols), g)
        return (dx,)

    return T._node(vals, (x,), "maxabspool" if by_abs else "maxpool", backward)


def maxpool2d(x, window: int = 2, stride: int | None = None) -> Tensor:
    return _pool(x, window, stride, by_abs=False)


def maxabspool2d(x, window: int = 2, stride: int | None = None) -> Tensor:
    """Per window, the signed element whose absolute value is largest."""
    return _pool(x, window, stride, by_abs=True)


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise ``x`` and the running
    buffers are updated in place (unbiased variance, as is conventional).
    """
    x = as_tensor(x)
    if x.ndim != 4 or running_mean.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm input {x.shape} vs {running_mean.shape[0]} channels")
    c = x.shape[1]
    if training:
        mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        count = x.size // c
        unbiased = var.data.reshape(c) * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        xhat = xc / T.sqrt(var + eps)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x - mu) * inv
    return xhat * as_tensor(gamma).reshape(1, c, 1, 1) + as_tensor(beta).reshape(1, c, 1, 1)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out_features, in_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != {weight.shape[1]}")
    out = x @ weight.T
    return out if bias is None else out + bias


def _adaptive_matrix(size: int, out: int) -> np.ndarray:
    m = np.zeros((size, out))
    for i in range(out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)
        m[lo:hi, i] = 1.0 / (hi - lo)
    return m


def adaptive_avgpool2d(x, out_hw: tuple[int, int] = (1, 1)) -> Tensor:
    """Average over adaptive windows so that the output is ``out_hw`` spatially."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = out_hw
    if (oh, ow) == (1, 1):
        return T.mean(x, axis=(2, 3), keepdims=True)
    a = np.kron(_adaptive_matrix(h, oh), _adaptive_matrix(w, ow)).astype(x.dtype)
    return (x.reshape(n * c, h * w) @ Tensor(a)).reshape(n, c, oh, ow)


def log_softmax(logits) -> Tensor:
    z = as_tensor(logits)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return T._node(out, (z,), "log_softmax",
                   lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logp = log_softmax(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logp.shape[0],):
        raise ShapeError(f"labels {labels.shape} vs logits {logp.shape}")
    picked = logp[np.arange(len(labels)), labels]
    return -T.mean(picked)


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))
