"""Differentiable operations on :class:`~glefld.tensor.Tensor`.

Every op computes its forward value with numpy, checks it is finite, and, if a
tape is active and any input requires a gradient, records a backward kernel.
Backward kernels are module-level ``_*_backward`` functions bound with
``functools.partial`` at forward time.
"""

from __future__ import annotations

from functools import partial
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, Record, ShapeError, Tensor, active_tape

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _check_finite(name: str, arr: np.ndarray, what: str = "output") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: non-finite values in {what}")


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    _check_finite(name, data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Record(name, tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and shape ops


def _add_backward(sa, sb, g):
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit("add", a.data + b.data, (a, b), partial(_add_backward, a.shape, b.shape))


def _sub_backward(sa, sb, g):
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit("sub", a.data - b.data, (a, b), partial(_sub_backward, a.shape, b.shape))


def _mul_backward(a, b, g):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit("mul", a.data * b.data, (a, b), partial(_mul_backward, a.data, b.data))


def _sum_backward(shape, g):
    return (np.broadcast_to(g, shape).copy(),)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _emit("sum", np.asarray(x.data.sum()), (x,), partial(_sum_backward, x.shape))


def _reshape_backward(shape, g):
    return (g.reshape(shape),)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _emit("reshape", out, (x,), partial(_reshape_backward, x.shape))


def _transpose_backward(axes, g):
    return (g.transpose(np.argsort(axes)),)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 partial(_transpose_backward, axes))


def _relu_backward(x, g):
    return (g * (x > 0),)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    return _emit("relu", np.maximum(x.data, 0.0), (x,), partial(_relu_backward, x.data))


def _softmax_backward(s, g):
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilised by subtracting the row max."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows: trailing axis must be non-empty, got shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax_rows", s, (x,), partial(_softmax_backward, s))


def _matmul_backward(a, b, g):
    return g @ b.transpose(0, 2, 1), a.transpose(0, 2, 1) @ g


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """``[B,M,K] @ [B,K,N] -> [B,M,N]``."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"matmul_batched: expected 3-d operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_batched: batch axis mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"matmul_batched: inner axis mismatch {a.shape[2]} vs {b.shape[1]}")
    return _emit("matmul_batched", np.matmul(a.data, b.data), (a, b),
                 partial(_matmul_backward, a.data, b.data))


# ----------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Padded ``[N,C,Hp,Wp]`` -> ``[N*Ho*Wo, C*kh*kw]`` patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add ``[N*Ho*Wo, C*kh*kw]`` patches into a padded ``[N,C,Hp,Wp]`` array."""
    n, c, hp, wp = shape
    # accumulate channels-last from one contiguous copy; the strided adds are the hot loop
    cols = np.ascontiguousarray(cols.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 1, 2, 3))
    out = np.zeros((n, hp, wp, c))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[i, j]
    return out.transpose(0, 3, 1, 2)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return x if p == 0 else np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check_conv_args(name, x, weight, bias, stride, padding, cin_axis):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be [N,C,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"{name}: weight must be 4-d, got shape {weight.shape}")
    if stride < 1:
        raise ValueError(f"{name}: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"{name}: padding must be non-negative, got {padding}")
    if weight.shape[cin_axis] != x.shape[1]:
        raise ShapeError(f"{name}: input channel axis has {x.shape[1]} but weight expects {weight.shape[cin_axis]}")
    cout = weight.shape[1 - cin_axis]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"{name}: bias shape {bias.shape} does not match output channels {cout}")
    _check_finite(name, x.data, "input")


def _conv2d_backward(cols, w, xshape, stride, padding, has_bias, g):
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (g2.T @ cols).reshape(w.shape)
    dcols = g2 @ w.reshape(cout, -1)
    dxp = _col2im(dcols, (n, cin, h + 2 * padding, wd + 2 * padding), kh, kw, stride, ho, wo)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    db = g2.sum(axis=0) if has_bias else None
    return dx, dw, db


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of zero-padded ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw]."""
    _check_conv_args("conv2d", x, weight, bias, stride, padding, cin_axis=1)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(_pad(x.data, padding), kh, kw, stride)
    out = cols @ weight.data.reshape(cout, -1).T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs,
                 partial(_conv2d_backward, cols, weight.data, x.shape, stride, padding, bias is not None))


def _conv_transpose2d_backward(xm, w, xshape, stride, padding, has_bias, g):
    n, cin, h, wd = xshape
    _, cout, kh, kw = w.shape
    gcols = _im2col(_pad(g, padding), kh, kw, stride)  # [N*H*W, Cout*kh*kw]
    dx = (gcols @ w.reshape(cin, -1).T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
    dw = (xm.T @ gcols).reshape(w.shape)
    db = g.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is laid out [Cin,Cout,kh,kw].

    Output size is ``(H-1)*stride - 2*padding + kh``; kernel 4, stride 2,
    padding 1 doubles the spatial extent.
    """
    _check_conv_args("conv_transpose2d", x, weight, bias, stride, padding, cin_axis=0)
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf - 2 * padding < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves no output rows (full height {hf})")
    if wf - 2 * padding < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves no output columns (full width {wf})")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = xm @ weight.data.reshape(cin, -1)
    full = _col2im(cols, (n, cout, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding:hf - padding, padding:wf - padding] if padding else full
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv_transpose2d", out, inputs,
                 partial(_conv_transpose2d_backward, xm, weight.data, x.shape, stride, padding, bias is not None))


def _maxpool_backward(xshape, idx, g):
    n, c, h, w = xshape
    onehot = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
    dx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (dx,)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial extent must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _emit("max_pool2d", out, (x,), partial(_maxpool_backward, x.shape, idx))


# ----------------------------------------------------------------------------
# batch normalization


class RunningStats:
    """Per-channel running mean/variance for :func:`batchnorm2d`."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        self.mean = (1.0 - momentum) * self.mean + momentum * mean
        self.var = (1.0 - momentum) * self.var + momentum * var


def _bn_train_backward(xhat, invstd, gamma, g):
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    gam = gamma[None, :, None, None]
    dxhat_sum = (dbeta * gamma)[None, :, None, None]
    dxhat_xhat_sum = (dgamma * gamma)[None, :, None, None]
    dx = (invstd[None, :, None, None] / m) * (m * g * gam - dxhat_sum - xhat * dxhat_xhat_sum)
    return dx, dgamma, dbeta


def _bn_eval_backward(xhat, invstd, gamma, g):
    dx = g * (gamma * invstd)[None, :, None, None]
    return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats, training: bool,
                eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalise the input and are folded
    into ``running`` by an exponential moving average (unbiased variance);
    in eval mode ``running`` is used as-is and left untouched.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be [N,C,H,W], got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: channel axis has {c} but gamma/beta have shapes {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("batchnorm2d: epsilon must be positive")
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 1:
            raise ShapeError("batchnorm2d: need at least one element per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running.update(mean, unbiased, momentum)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * invstd[None, :, None, None]
        kernel = _bn_train_backward
    else:
        invstd = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean[None, :, None, None]) * invstd[None, :, None, None]
        kernel = _bn_eval_backward
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    return _emit("batchnorm2d", out, (x, gamma, beta), partial(kernel, xhat, invstd, gamma.data))
