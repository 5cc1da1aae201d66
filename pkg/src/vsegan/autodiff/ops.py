"""Differentiable operations used by the generator, discriminator and losses.

Spatial ops take NCHW tensors. Convolutions use "same" padding: the
output of a stride-``s`` convolution over length ``L`` has ``ceil(L/s)``
positions, the padding being split with the extra element at the end.
``conv_transpose2d`` is defined as the exact adjoint of that convolution,
so its output is ``L*s`` long.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractViolation, DegenerateStatisticsError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    a, b = value
    return int(a), int(b)


# --------------------------------------------------------------------------
# elementwise and reductions

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at 0
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,), "abs")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """Elementwise ``max(x, slope*x)``; the derivative at 0 is taken as ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ContractViolation(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.data > 0
    y = np.where(positive, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(positive, g, g * x.dtype.type(slope)),)

    return Tensor._from_op(y, (x,), backward, "leaky_relu")


def sum_all(x: Tensor) -> Tensor:
    return Tensor._from_op(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
        out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
        return Tensor._from_op(
            out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")
    axis = tuple(np.atleast_1d(axis))
    n = int(np.prod([x.shape[a] for a in axis]))
    out = x.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).astype(x.dtype),)

    return Tensor._from_op(out, (x,), backward, "mean")


# --------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, dims) -> Tensor:
    dims = tuple(int(d) for d in dims)
    try:
        out = x.data.reshape(dims)
    except ValueError as exc:
        raise ContractViolation(f"cannot reshape {x.shape} to {dims}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis: ``[N, ...] -> [N, D]``."""
    return reshape(x, (x.shape[0], -1))


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ContractViolation("concat needs at least one tensor")
    ndim = inputs[0].ndim
    axis = axis % ndim
    for t in inputs[1:]:
        if t.ndim != ndim or any(
                t.shape[d] != inputs[0].shape[d] for d in range(ndim) if d != axis):
            raise ContractViolation(
                f"concat along axis {axis}: ragged shapes {[t.shape for t in inputs]}")
    sizes = [t.shape[axis] for t in inputs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(inputs)))

    return Tensor._from_op(
        np.concatenate([t.data for t in inputs], axis=axis), inputs, backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ContractViolation(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        stop = start + size
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(Tensor._from_op(x.data[index].copy(), (x,), backward, "split"))
        start = stop
    return outs


# --------------------------------------------------------------------------
# dense and convolutional layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[N, Din]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractViolation(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def same_padding(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_length, pad_before, pad_after)`` for "same" padding."""
    out = math.ceil(length / stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return out, total // 2, total - total // 2


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    # [N, C, ho, wo, kh, kw] strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw][:, :, :ho, :wo]


def _conv_geometry(h: int, w: int, kh: int, kw: int, sh: int, sw: int):
    ho, pt, pb = same_padding(h, kh, sh)
    wo, pl, pr = same_padding(w, kw, sw)
    return ho, wo, (pt, pb), (pl, pr)


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride, ho, wo) -> np.ndarray:
    kh, kw = w.shape[2:]
    win = _windows(xp, kh, kw, stride[0], stride[1], ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, ho, wo, F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_adjoint(g: np.ndarray, w: np.ndarray, stride, padded_shape, pads) -> np.ndarray:
    """Scatter ``g`` [N,F,ho,wo] back through weight [F,C,kh,kw] onto the unpadded input."""
    kh, kw = w.shape[2:]
    sh, sw = stride
    ho, wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, ho, wo, C, kh, kw
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, :, :, :, i, j]
    (pt, pb), (pl, pr) = pads
    return dxp[:, :, pt:padded_shape[2] - pb, pl:padded_shape[3] - pr]


def _weight_grad(g: np.ndarray, xp: np.ndarray, kernel, stride) -> np.ndarray:
    ho, wo = g.shape[2:]
    win = _windows(xp, kernel[0], kernel[1], stride[0], stride[1], ho, wo)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # F, C, kh, kw


def _pad(x: np.ndarray, pads) -> np.ndarray:
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1)) -> Tensor:
    """2-D cross-correlation with "same" padding.

    ``x`` is ``[N, C, H, W]``, ``weight`` is ``[F, C, kh, kw]``; the result is
    ``[N, F, ceil(H/sh), ceil(W/sw)]``.
    """
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ContractViolation(f"conv2d stride must be >= 1, got {(sh, sw)}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractViolation(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    n, c, h, w = x.shape
    kh, kw = weight.shape[2:]
    ho, wo, ph, pw = _conv_geometry(h, w, kh, kw, sh, sw)
    pads = (ph, pw)
    xp = _pad(x.data, pads)
    out = _conv_forward(xp, weight.data, (sh, sw), ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        dx = _conv_input_adjoint(g, weight.data, (sh, sw), xp.shape, pads)
        dw = _weight_grad(g, xp, (kh, kw), (sh, sw))
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1)) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`.

    ``x`` is ``[N, Cin, H, W]`` and ``weight`` is ``[Cin, Cout, kh, kw]``. The
    output ``[N, Cout, H*sh, W*sw]`` satisfies
    ``<conv2d(a, w), b> == <a, conv_transpose2d(b, w)>``.
    """
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ContractViolation(f"conv_transpose2d stride must be >= 1, got {(sh, sw)}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ContractViolation(f"conv_transpose2d: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ContractViolation(f"conv_transpose2d: bias {bias.shape} does not match weight {weight.shape}")
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    kh, kw = weight.shape[2:]
    oh, ow = h * sh, w * sw
    ho, wo, ph, pw = _conv_geometry(oh, ow, kh, kw, sh, sw)
    assert (ho, wo) == (h, w)
    pads = (ph, pw)
    padded_shape = (n, cout, oh + sum(ph), ow + sum(pw))
    out = _conv_input_adjoint(x.data, weight.data, (sh, sw), padded_shape, pads)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gp = _pad(g, pads)
        dx = _conv_forward(gp, weight.data, (sh, sw), h, w)
        dw = _weight_grad(x.data, gp, (kh, kw), (sh, sw))
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv_transpose2d")


def maxpool2d(x: Tensor, window=(2, 2)) -> Tensor:
    """Non-overlapping max pooling; a ragged last window covers what is left.

    The backward pass sends each gradient to the first (row-major) maximum
    of its window.
    """
    ph, pw = _pair(window)
    if ph < 1 or pw < 1:
        raise ContractViolation(f"maxpool2d window must be >= 1, got {(ph, pw)}")
    if x.ndim != 4:
        raise ContractViolation(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = math.ceil(h / ph), math.ceil(w / pw)
    if ph == pw == 1:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "maxpool2d")
    xp = x.data
    if ho * ph != h or wo * pw != w:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, ho * ph - h), (0, wo * pw - w)),
                    constant_values=-np.inf)
    blocks = xp.reshape(n, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dblocks = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        dx = dblocks.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * ph, wo * pw)
        return (dx[:, :, :h, :w],)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = BN_EPS,
                momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalisation over the N, H, W axes.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``momentum*old + (1-momentum)*new``
    (unbiased variance). Evaluation mode normalises with the running values.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ContractViolation(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n, c, h, w = x.shape
    count = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if count < 2:
            raise DegenerateStatisticsError(
                f"batchnorm2d in train mode needs N*H*W >= 2, got {count}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (count / (count - 1))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv_std.reshape(shape) / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")
