"""Minimal module system: parameter containers with dotted names and train/eval mode."""

from __future__ import annotations

import math
import zlib
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Base container. Parameters, buffers and child modules are discovered
    from instance attributes in assignment order; lists of modules are
    indexed (``decoder.0.conv.weight``)."""

    training = True

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(_join(prefix, name))
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield from child.named_modules(_join(prefix, f"{name}.{i}"))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield _join(mod_name, name), value

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        """Non-trainable state (batch-norm running statistics)."""
        for mod_name, mod in self.named_modules(prefix):
            if isinstance(mod, BatchNorm2d):
                yield _join(mod_name, "running_mean"), mod.running, "mean"
                yield _join(mod_name, "running_var"), mod.running, "var"

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: float) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        self.weight = Parameter(np.zeros((cout, cin, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def fan_in(self) -> int:
        cout, cin, kh, kw = self.weight.shape
        return cin * kh * kw

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0, bias: bool = True):
        self.weight = Parameter(np.zeros((cin, cout, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def fan_in(self) -> float:
        # inputs feeding one output pixel: each receives ~(k/stride)^2 taps per input channel
        cin, cout, kh, kw = self.weight.shape
        return cin * kh * kw / (self.stride * self.stride)

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running = ops.RunningStats(channels)

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running, self.training)


class ConvBNReLU(Module):
    """3x3 conv (no bias, the batch norm absorbs it) -> batch norm -> ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, padding: int = 1):
        self.conv = Conv2d(cin, cout, kernel, padding=padding, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class ConvReLU(Module):
    """Plain VGG-style conv with bias followed by ReLU."""

    def __init__(self, cin: int, cout: int):
        self.conv = Conv2d(cin, cout, 3, padding=1, bias=True)

    def forward(self, x):
        return ops.relu(self.conv(x))


class MaxPool(Module):
    def forward(self, x):
        return ops.max_pool2d(x)


class UpBlock(Module):
    """Transposed conv (kernel 4, stride 2, padding 1) -> batch norm -> ReLU."""

    def __init__(self, cin: int, cout: int):
        self.deconv = ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return ops.relu(self.bn(self.deconv(x)))


class Sequential(Module):
    def __init__(self, layers: list):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def init_weights(root: Module, rng: np.random.Generator, skip: Optional[set] = None) -> None:
    """He-uniform conv weights in parameter-name order; biases zero, BN to identity."""
    skip = skip or set()
    for _, mod in root.named_modules():
        if isinstance(mod, (Conv2d, ConvTranspose2d)) and id(mod) not in skip:
            mod.weight.data = he_uniform(rng, mod.weight.shape, mod.fan_in)
            if mod.bias is not None:
                mod.bias.data = np.zeros_like(mod.bias.data)


def init_weights_keyed(root: Module, seed: int) -> None:
    """Like :func:`init_weights`, but each weight draws from its own stream
    keyed by ``(seed, crc32(name))``.

    Adding or removing a module then leaves every other parameter's initial
    value untouched, so two configs differing in one module start from
    identical shared weights.
    """
    for name, mod in root.named_modules():
        if isinstance(mod, (Conv2d, ConvTranspose2d)):
            key = zlib.crc32(f"{name}.weight".encode("utf-8"))
            mod.weight.data = he_uniform(np.random.default_rng([seed, key]), mod.weight.shape, mod.fan_in)
            if mod.bias is not None:
                mod.bias.data = np.zeros_like(mod.bias.data)
