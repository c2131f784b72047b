"""Differentiable operations over :class:`~fpnkit.tensor.Tensor`.

Forward passes are numpy; the convolution family lowers through the kernel
backend (compiled or fallback).  Each op registers a closure that scatters the
output gradient back onto its inputs.  Shape problems raise
:class:`ShapeError` / :class:`ConfigurationError` eagerly, with the offending
shapes in the message.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import backend
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor, grad_enabled


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast add: {a.shape} with {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a.grad -= g

    return _result(-a.data, (a,), backward)


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_as_tensor(b, a)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast mul: {a.shape} with {b.shape}") from None
    a_data, b_data = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b_data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a_data, b.shape)

    return _result(data, (a, b), backward)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale an N x C x H x W map by a per-channel vector of shape N x C."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale expects NxCxHxW and NxC, got {x.shape} and {s.shape}")
    return mul(x, reshape(s, (*s.shape, 1, 1)))


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x.grad += g

    return _result(np.asarray(x.data.sum()), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    data = x.data.reshape(shape)

    def backward(g):
        x.grad += g.reshape(old)

    return _result(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t.grad += g[tuple(idx)]

    return _result(data, tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        x.grad[idx] += g

    return _result(x.data[idx], (x,), backward)


# ---------------------------------------------------------------------------
# activations and losses
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x.grad += g * mask

    return _result(np.maximum(x.data, 0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        x.grad += g * out * (1.0 - out)

    return _result(out, (x,), backward)


def fully_connected(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x: N x Din, w: Dout x Din, optional b: Dout."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected shapes incompatible: x {x.shape}, w {w.shape}")
    data = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape[0]}")
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x.grad += g @ w.data
        if w.requires_grad:
            w.grad += g.T @ x.data
        if b is not None and b.requires_grad:
            b.grad += g.sum(axis=0)

    return _result(data, parents, backward)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of logits N x K against target distributions N x K.

    Targets may be soft (e.g. mixed labels); they are treated as constants.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"cross-entropy shapes incompatible: logits {logits.shape}, targets {t.shape}")
    n = logits.shape[0]
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    se = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(se)
    loss = -(t * logp).sum() / n
    probs = ez / se

    def backward(g):
        logits.grad += g * (probs - t) / n

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


def _pad_nchw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution; x: N x Cin x H x W, w: Cout x Cin x kh x kw."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ConfigurationError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"weight {w.shape} expects {w.shape[1]}"
        )
    if pad < 0 or stride < 1:
        raise ConfigurationError(f"conv2d requires pad >= 0 and stride >= 1, got pad={pad}, stride={stride}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ConfigurationError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    one_by_one = kh == 1 and kw == 1 and stride == 1 and pad == 0
    if one_by_one:
        cols = x.data.reshape(n, cin, h * wd)
    else:
        cols = backend.im2col(_pad_nchw(x.data, pad), kh, kw, stride)
    wmat = w.data.reshape(cout, cin * kh * kw)
    data = np.matmul(wmat, cols).reshape(n, cout, oh, ow)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} does not match output channels {cout}")
        data = data + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(n, cout, oh * ow)
        if w.requires_grad:
            w.grad += np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if one_by_one:
                x.grad += gcols.reshape(x.shape)
            else:
                gxp = backend.col2im(gcols, hp, wp, kh, kw, stride)
                x.grad += gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is not None and b.requires_grad:
            b.grad += g.sum(axis=(0, 2, 3))

    return _result(data, parents, backward)


def transposed_conv2d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2, pad: int = 1
) -> Tensor:
    """Learnable x2 upsampling; x: N x Cin x h x w, w: Cin x Cout x kh x kw.

    The (kernel, stride, pad) combination must double the spatial extents for
    every input size, i.e. stride == 2 and k - 2*pad == 2 on both axes.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ConfigurationError(
            f"transposed_conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"weight {w.shape} expects {w.shape[0]}"
        )
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    if stride != 2 or kh - 2 * pad != 2 or kw - 2 * pad != 2:
        raise ConfigurationError(
            f"transposed_conv2d output cannot double exactly with kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    oh, ow = 2 * h, 2 * wd
    hp, wp = oh + 2 * pad, ow + 2 * pad

    wmat = w.data.reshape(cin, cout * kh * kw)
    xflat = x.data.reshape(n, cin, h * wd)
    cols = np.matmul(wmat.T, xflat)
    outp = backend.col2im(cols, hp, wp, kh, kw, stride)
    data = outp[:, :, pad : pad + oh, pad : pad + ow] if pad else outp
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"bias shape {b.shape} does not match output channels {cout}")
        data = data + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gcols = backend.im2col(_pad_nchw(g, pad), kh, kw, stride)
        if x.requires_grad:
            x.grad += np.matmul(wmat, gcols).reshape(x.shape)
        if w.requires_grad:
            w.grad += np.tensordot(xflat, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            b.grad += g.sum(axis=(0, 2, 3))

    return _result(data, parents, backward)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    if pad >= kernel:
        raise ConfigurationError(f"max_pool2d pad {pad} must be smaller than kernel {kernel}")
    n, c, h, wd = x.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    xp = _pad_nchw(x.data, pad, value=-np.inf).reshape(n * c, 1, hp, wp)
    cols = backend.im2col(np.ascontiguousarray(xp), kernel, kernel, stride)
    data = cols.max(axis=1).reshape(n, c, oh, ow)
    arg = cols.argmax(axis=1)

    def backward(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, arg[:, None, :], g.reshape(n * c, 1, oh * ow), axis=1)
        gxp = backend.col2im(gcols, hp, wp, kernel, kernel, stride).reshape(n, c, hp, wp)
        x.grad += gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _resize_matrix(n: int, kind: str, dtype_str: str) -> np.ndarray:
    """Row-interpolation matrix mapping n source rows to 2n destination rows.

    Bilinear uses half-pixel source centers (src = (dst + 0.5)/2 - 0.5) with
    edge clamping, so constant inputs are preserved exactly and a 1-pixel axis
    replicates.  Nearest copies the floor-mapped source row.
    """
    m = np.zeros((2 * n, n), dtype=np.float64)
    for d in range(2 * n):
        if kind == "nearest":
            m[d, d // 2] = 1.0
        else:
            s = min(max((d + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
            i0 = int(np.floor(s))
            i1 = min(i0 + 1, n - 1)
            f = s - i0
            m[d, i0] += 1.0 - f
            m[d, i1] += f
    return m.astype(dtype_str)


def _resize(x: Tensor, factor: int, kind: str) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"{kind}_resize expects 4-D input, got {x.shape}")
    if factor != 2:
        raise ConfigurationError(f"{kind}_resize supports factor 2 only, got {factor}")
    h, w = x.shape[2], x.shape[3]
    rh = _resize_matrix(h, kind, x.dtype.str)
    rw = _resize_matrix(w, kind, x.dtype.str)
    data = np.matmul(np.matmul(rh, x.data), rw.T)

    def backward(g):
        x.grad += np.matmul(np.matmul(rh.T, g), rw)

    return _result(data, (x,), backward)


def bilinear_resize(x: Tensor, factor: int = 2) -> Tensor:
    return _resize(x, factor, "bilinear")


def nearest_resize(x: Tensor, factor: int = 2) -> Tensor:
    return _resize(x, factor, "nearest")


# ---------------------------------------------------------------------------
# pooling over axes
# ---------------------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: N x C x H x W -> N x C."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    data = x.data.mean(axis=(2, 3))

    def backward(g):
        x.grad += g[:, :, None, None] / (h * w)

    return _result(data, (x,), backward)


def cross_channel_mean(x: Tensor) -> Tensor:
    """Per-pixel mean over channels: N x C x H x W -> N x 1 x H x W."""
    if x.ndim != 4:
        raise ShapeError(f"cross_channel_mean expects 4-D input, got {x.shape}")
    c = x.shape[1]
    data = x.data.mean(axis=1, keepdims=True)

    def backward(g):
        x.grad += g / c

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over N, H, W.

    Train mode normalizes by batch statistics and folds them into the running
    buffers (unbiased variance, momentum-weighted); eval mode normalizes by
    the running buffers.  Fresh buffers (mean 0, var 1) are valid in eval.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")

    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // c
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            beta.grad += g.sum(axis=axes)
        if x.requires_grad:
            gxhat = g * gamma.data[:, None, None]
            if training:
                m = x.data.size // c
                s1 = gxhat.sum(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                x.grad += (inv_std[:, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                x.grad += gxhat * inv_std[:, None, None]

    return _result(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# operator sugar on Tensor
# ---------------------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: add(neg(self), other)
Tensor.__neg__ = neg
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.reshape = reshape
Tensor.sum = sum_all
