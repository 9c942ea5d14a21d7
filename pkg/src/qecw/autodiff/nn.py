"""Layers built on the ops, with named parameters and buffers.

Affine layers (Dense, Conv1d, Conv2d) carry an optional quantisation state so
the compress module can switch them to fake-quantised forwards in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ("mask",)

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data)
        super().__init__(arr if arr.dtype == np.float64 else arr.astype(np.float32), requires_grad=True, name=name)
        self.mask: np.ndarray | None = None


class Module:
    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def modules(self, prefix: str = ""):
        yield prefix, self
        for key, child in self.children():
            yield from child.modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key in getattr(self, "_buffers", ()):
            yield (f"{prefix}.{key}" if prefix else key), getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}.{key}" if prefix else key)

    def train(self, mode: bool = True):
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} does not match {p.shape}")
            p.data = state[name].astype(p.dtype, copy=True)
        for name, b in buffers.items():
            b[...] = state[name]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def to(self, dtype):
        """Cast parameters and buffers (used by the float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.modules():
            for key in getattr(m, "_buffers", ()):
                setattr(m, key, getattr(m, key).astype(dtype))
        return self


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class QuantState:
    w_bits: int
    a_bits: int
    a_scale: float | None = None  # fixed after calibration
    calibrating: bool = False
    a_absmax: float = 0.0
    a_min: float = 0.0
    a_unsigned: bool = False  # inputs seen non-negative during calibration (post-ReLU)

    @property
    def qmax_w(self) -> int:
        return 2 ** (self.w_bits - 1) - 1

    @property
    def qmax_a(self) -> int:
        return 2 ** self.a_bits - 1 if self.a_unsigned else 2 ** (self.a_bits - 1) - 1


def weight_scale(w: np.ndarray, bits: int) -> np.ndarray:
    """Per-output-channel symmetric scale max|W| / (2^(b-1) - 1)."""
    absmax = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
    return (absmax / (2 ** (bits - 1) - 1)).astype(w.dtype)


class _Affine(Module):
    quant: QuantState | None = None

    def _quant_inputs(self, x: Tensor) -> tuple[Tensor, Tensor]:
        w = self.weight
        q = self.quant
        if q is None:
            return x, w
        if q.calibrating:
            q.a_absmax = max(q.a_absmax, float(np.abs(x.data).max(initial=0.0)))
            q.a_min = min(q.a_min, float(x.data.min(initial=0.0)))
            return x, w
        if q.a_scale is not None:
            x = ops.fake_quant(x, q.a_scale, q.a_bits, signed=not q.a_unsigned)
        w = ops.fake_quant(w, weight_scale(w.data, q.w_bits), q.w_bits, axis=0)
        return x, w

    def effective_weight(self) -> np.ndarray:
        """Weights as deployed: quantised onto the grid when a quant state is set."""
        w = self.weight.data
        if self.quant is None:
            return w
        s = weight_scale(w, self.quant.w_bits)
        return ops.fake_quant(Tensor(w), s, self.quant.w_bits, axis=0).data


class Dense(_Affine):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (n_out, n_in), n_in))
        self.bias = Parameter(np.zeros(n_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x, w = self._quant_inputs(x)
        return ops.dense(x, w, self.bias)


class Conv2d(_Affine):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = False):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x, w = self._quant_inputs(x)
        return ops.conv2d(x, w, self.bias)


class Conv1d(_Affine):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = False):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, 3), c_in * 3))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x, w = self._quant_inputs(x)
        return ops.conv1d(x, w, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(features, np.float32))
        self.beta = Parameter(np.zeros(features, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator, channelwise: bool = False):
        super().__init__()
        self.rate = rate
        self.rng = rng
        self.channelwise = channelwise

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.rate, self.training, self.rng, self.channelwise)


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x
