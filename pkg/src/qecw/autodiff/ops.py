"""Differentiable ops.  Each returns a Tensor whose backward maps the output
gradient to one gradient per parent (None where no gradient flows)."""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check(cond: bool, op: str, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


# -- elementwise and structural -------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a, getattr(a, "dtype", None)), as_tensor(b)
    try:
        out = a.data + b.data.astype(a.dtype, copy=False)
    except ValueError:
        _check(False, "add", a.shape, b.shape)
    return make(out, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data.astype(a.dtype, copy=False)
    except ValueError:
        _check(False, "mul", a.shape, b.shape)
    return make(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum_all(x: Tensor) -> Tensor:
    return make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        _check(False, "reshape", x.shape, shape)
    return make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    _check(sorted(axes) == list(range(x.ndim)), "transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    out = (v * cdf).astype(x.dtype)
    return make(out, (x,), lambda g: ((g * (cdf + v * pdf)).astype(x.dtype),), "gelu")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator, channelwise: bool = False) -> Tensor:
    """Inverted dropout; ``channelwise`` drops whole feature maps (axes >= 2 share a mask)."""
    if not training or rate == 0.0:
        return x
    shape = x.shape[:2] + (1,) * (x.ndim - 2) if channelwise else x.shape
    mask = (rng.random(shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def mean_pool(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    return make(x.data.mean(axis=axis), (x,),
                lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis) / np.asarray(n, x.dtype),), "mean_pool")


# -- affine ---------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., in) @ w.T with w shaped (out, in)."""
    _check(w.ndim == 2 and x.shape[-1] == w.shape[1], "dense", x.shape, w.shape)
    out = x.data @ w.data.T
    if b is not None:
        _check(b.shape == (w.shape[0],), "dense bias", b.shape, w.shape)
        out = out + b.data

    def backward(g):
        gx = g @ w.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(out, parents, backward, "dense")


def _shift_cols(xp: np.ndarray, spatial: tuple[int, ...]) -> np.ndarray:
    """im2col for a channels-last padded input: concat of every 3-tap shift, ordered (taps..., C)."""
    if len(spatial) == 2:
        h, w = spatial
        parts = [xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)]
    else:
        (length,) = spatial
        parts = [xp[:, i:i + length, :] for i in range(3)]
    return np.concatenate(parts, axis=-1)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3, stride 1, zero padding 1.  x (N, C, H, W), w (O, C, 3, 3)."""
    _check(x.ndim == 4 and w.ndim == 4 and w.shape[1] == x.shape[1] and w.shape[2:] == (3, 3),
           "conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _shift_cols(xp, (h, wd)).reshape(n * h * wd, 9 * c)
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, 9 * c)
    out = cols @ wm.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        gw = (gm.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        gcols = (gm @ wm).reshape(n, h, wd, 9 * c)
        gxp = np.zeros((n, h + 2, wd + 2, c), dtype=x.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            gxp[:, i:i + h, j:j + wd, :] += gcols[..., k * c:(k + 1) * c]
        gb = gm.sum(axis=0) if b is not None else None
        return gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2), gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """k=3, stride 1, zero padding 1.  x (N, C, L), w (O, C, 3)."""
    _check(x.ndim == 3 and w.ndim == 3 and w.shape[1] == x.shape[1] and w.shape[2] == 3,
           "conv1d", x.shape, w.shape)
    n, c, length = x.shape
    o = w.shape[0]
    xp = np.pad(x.data.transpose(0, 2, 1), ((0, 0), (1, 1), (0, 0)))
    cols = _shift_cols(xp, (length,)).reshape(n * length, 3 * c)
    wm = w.data.transpose(0, 2, 1).reshape(o, 3 * c)
    out = cols @ wm.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, length, o).transpose(0, 2, 1)

    def backward(g):
        gm = g.transpose(0, 2, 1).reshape(n * length, o)
        gw = (gm.T @ cols).reshape(o, 3, c).transpose(0, 2, 1)
        gcols = (gm @ wm).reshape(n, length, 3 * c)
        gxp = np.zeros((n, length + 2, c), dtype=x.dtype)
        for i in range(3):
            gxp[:, i:i + length, :] += gcols[..., i * c:(i + 1) * c]
        gb = gm.sum(axis=0) if b is not None else None
        return gxp[:, 1:-1, :].transpose(0, 2, 1), gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make(np.ascontiguousarray(out), parents, backward, "conv1d")


# -- normalisation --------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel axis 1; statistics over every other axis.  Updates running stats in place when training."""
    _check(x.ndim >= 2 and gamma.shape == (x.shape[1],) and beta.shape == gamma.shape,
           "batch_norm", x.shape, gamma.shape)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    m = x.data.size // x.shape[1]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx.astype(x.dtype), gg, gb

    return make(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    _check(gamma.shape == (x.shape[-1],) and beta.shape == gamma.shape, "layer_norm", x.shape, gamma.shape)
    n = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = (inv / n) * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx.astype(x.dtype), gg, gb

    return make(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


# -- loss -----------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    y = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = 0.5 * (1 + np.tanh(0.5 * z))  # overflow-free sigmoid
    return make(np.asarray(loss.mean(), dtype=logits.dtype), (logits,),
                lambda g: ((g * (sig - y) / n).astype(logits.dtype),), "bce_with_logits")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * x))


# -- quantisation ---------------------------------------------------------

def round_half_even(x: np.ndarray) -> np.ndarray:
    return np.rint(x)


def code_range(bits: int, signed: bool = True) -> tuple[int, int]:
    return (-(2 ** (bits - 1)), 2 ** (bits - 1) - 1) if signed else (0, 2 ** bits - 1)


def fake_quant(x: Tensor, scale, bits: int, axis: int | None = None, signed: bool = True) -> Tensor:
    """Symmetric fake quantisation with a clipped straight-through gradient.

    ``scale`` is a scalar (per tensor) or a vector along ``axis`` (per channel).
    Values are mapped to ``scale * clip(round(x / scale), qmin, qmax)`` with
    [qmin, qmax] = [-2^(b-1), 2^(b-1)-1], or [0, 2^b-1] when ``signed`` is off;
    the gradient passes unchanged wherever the value rounds onto the grid
    without clipping and is zero elsewhere.  The scale is treated as a constant.
    """
    qmin, qmax = code_range(bits, signed)
    s = np.asarray(scale, dtype=x.dtype)
    if axis is not None and s.ndim == 1:
        shape = [1] * x.ndim
        shape[axis] = -1
        s = s.reshape(shape)
    s = np.where(s > 0, s, np.asarray(1.0, x.dtype))
    r = x.data / s
    q = np.clip(round_half_even(r), qmin, qmax)
    # pass the gradient wherever rounding, not clipping, decided the output
    inside = (r >= qmin - 0.5) & (r <= qmax + 0.5)
    return make((q * s).astype(x.dtype), (x,), lambda g: (g * inside,), "fake_quant")
