"""Stateful layers with hand-written backward passes.

A layer caches whatever its backward pass needs during ``forward``; calling
``backward`` with the upstream gradient accumulates parameter gradients into
``Parameter.grad`` and returns the gradient with respect to the input.
"""
from __future__ import annotations

import math
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F


class Parameter:
    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Layer:
    training = True

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Layer):
                yield from value.named_buffers(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def children(self) -> Iterator["Layer"]:
        for value in vars(self).values():
            if isinstance(value, Layer):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Layer))

    def train(self, mode: bool = True):
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast parameters and buffers in place (grads are reset)."""
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.zero_grad()
        for layer in self._all_layers():
            for name in getattr(layer, "_buffers", ()):
                setattr(layer, name, getattr(layer, name).astype(dtype))
        return self

    def _all_layers(self):
        yield self
        for child in self.children():
            yield from child._all_layers()

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


def fan_in_uniform(rng, shape, fan_in, dtype=np.float32):
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)); smaller than He init, which keeps the
    # effective step size behind batch norm larger early in training
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=None, groups=1,
                 bias=True, rng=None, dtype=np.float32):
        if c_in % groups or c_out % groups:
            raise ValueError(f"channels {c_in}->{c_out} not divisible by groups={groups}")
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        rng = np.random.default_rng(rng)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        fan_in = (c_in // groups) * kernel_size ** 2
        self.weight = Parameter(
            fan_in_uniform(rng, (c_out, c_in // groups, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(fan_in_uniform(rng, c_out, fan_in, dtype)) if bias else None
        self._cache = None

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        out, self._cache = F.conv2d_forward(x, self.weight.value, b, self.stride,
                                            self.padding, self.groups)
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class BatchNorm2d(Layer):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x):
        out, self._cache = F.batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps)
        return out

    def backward(self, dout):
        dx, dg, db = F.batchnorm_backward(dout, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        self.weight = Parameter(
            fan_in_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(fan_in_uniform(rng, out_features, in_features, dtype))
        self._cache = None

    def forward(self, x):
        out, self._cache = F.linear_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = F.linear_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class _Elementwise(Layer):
    _fwd = _bwd = None

    def __init__(self):
        self._cache = None

    def forward(self, x):
        out, self._cache = type(self)._fwd(x)
        return out

    def backward(self, dout):
        return type(self)._bwd(dout, self._cache)


class ReLU(_Elementwise):
    _fwd = staticmethod(F.relu_forward)
    _bwd = staticmethod(F.relu_backward)


class Sigmoid(_Elementwise):
    _fwd = staticmethod(F.sigmoid_forward)
    _bwd = staticmethod(F.sigmoid_backward)


class Swish(_Elementwise):
    _fwd = staticmethod(F.swish_forward)
    _bwd = staticmethod(F.swish_backward)


class HSwish(_Elementwise):
    _fwd = staticmethod(F.hswish_forward)
    _bwd = staticmethod(F.hswish_backward)


ACTIVATIONS = {"h-swish": HSwish, "relu": ReLU, "swish": Swish}


def make_activation(name: str) -> Layer:
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")


class GlobalAvgPool(_Elementwise):
    _fwd = staticmethod(F.global_avg_pool_forward)
    _bwd = staticmethod(F.global_avg_pool_backward)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout
