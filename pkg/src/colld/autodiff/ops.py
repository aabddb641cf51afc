"""Differentiable primitives.

Every primitive takes and returns :class:`Tensor` objects and registers a
backward closure. Broadcasting is limited to what the encoder needs: a
trailing-aligned operand (bias vectors, per-channel gains, constant masks)
against a batched one.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import ConfigurationError
from .tensor import Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain Python numbers take the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor.from_op(a.data * a.data.dtype.type(c), "scale", (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must agree or ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigurationError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ConfigurationError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(a.data @ b.data, "matmul", (a, b), backward)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor.from_op(a.data.reshape(shape), "reshape", (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor.from_op(np.transpose(a.data, axes), "transpose", (a,), backward)


def getitem(a, key) -> Tensor:
    """Indexing, including integer-array gathers (embedding lookup)."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return Tensor.from_op(np.asarray(a.data[key]), "getitem", (a,), backward)


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape."""
    return getitem(table, np.asarray(ids, dtype=np.intp))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, "softmax", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(y, "log_softmax", (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(s), axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return Tensor.from_op(y, "logsumexp", (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-channel gain and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ConfigurationError(f"layer_norm: gain/shift {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor.from_op(out, "layer_norm", (x, gamma, beta), backward)


def depthwise_conv1d(x, weight, bias) -> Tensor:
    """Per-channel convolution along time with zero "same" padding.

    ``x`` is (..., T, C), ``weight`` is (K, C) with K odd, ``bias`` is (C,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k, c = weight.shape
    if k % 2 != 1:
        raise ConfigurationError(f"depthwise_conv1d: kernel size must be odd, got {k}")
    if x.shape[-1] != c or bias.shape != (c,):
        raise ConfigurationError(f"depthwise_conv1d: channels {x.shape[-1]} vs weight {weight.shape}")
    half = k // 2
    t = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for i in range(k):
        out += xp[..., i:i + t, :] * weight.data[i]

    def backward(g):
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[..., i:i + t, :] += g * weight.data[i]
            gx = gxp[..., half:half + t, :]
        gw = None
        if weight.requires_grad:
            lead = tuple(range(x.ndim - 1))
            gw = np.stack([(g * xp[..., i:i + t, :]).sum(axis=lead) for i in range(k)])
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out, "depthwise_conv1d", (x, weight, bias), backward)


def glu(a, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    a = as_tensor(a)
    if a.shape[axis] % 2:
        raise ConfigurationError(f"glu: axis extent {a.shape[axis]} is odd")
    first, second = np.split(a.data, 2, axis=axis)
    gate = _sigmoid(second)

    def backward(g):
        return (np.concatenate([g * gate, g * first * gate * (1.0 - gate)], axis=axis),)

    return Tensor.from_op(first * gate, "glu", (a,), backward)


def swish(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return Tensor.from_op(a.data * s, "swish", (a,), backward)


def cosine(u, v, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along ``axis``; ``eps`` is added to each norm."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ConfigurationError(f"cosine: shapes {u.shape} and {v.shape} differ")
    nu = np.sqrt((u.data * u.data).sum(axis=axis, keepdims=True))
    nv = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    du, dv = nu + eps, nv + eps
    dot = (u.data * v.data).sum(axis=axis, keepdims=True)
    c = dot / (du * dv)

    def backward(g):
        g = np.expand_dims(g, axis)
        gu = gv = None
        if u.requires_grad:
            # d/du of <u,v> / ((|u|+e)(|v|+e))
            safe = np.where(nu > 0, nu, 1.0)
            gu = g * (v.data / (du * dv) - c / du * u.data / safe)
        if v.requires_grad:
            safe = np.where(nv > 0, nv, 1.0)
            gv = g * (u.data / (du * dv) - c / dv * v.data / safe)
        return gu, gv

    return Tensor.from_op(np.squeeze(c, axis=axis), "cosine", (u, v), backward)


def hook(a, fn) -> Tensor:
    """Identity whose incoming gradient is passed through ``fn`` on the way back."""
    a = as_tensor(a)

    def backward(g):
        return (fn(g),)

    return Tensor.from_op(a.data, "hook", (a,), backward)
