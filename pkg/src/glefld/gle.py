"""Global-local embedding: a non-local block with residual projection followed
by two local 3x3 conv-BN-ReLU refinements, stackable ``k`` times."""

from __future__ import annotations

import numpy as np

from . import ops
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import ShapeError, Tensor

MAX_POSITIONS = 4096


class NonLocalBlock(Module):
    """Embedded-Gaussian non-local operation with a residual 1x1 projection.

    ``phi`` carries no bias: a bias on the key embedding adds the same
    constant to every logit of a softmax row, so it can never change the
    output and its gradient is identically zero.
    """

    def __init__(self, channels: int, embed: int | None = None):
        if embed is None:
            if channels % 2:
                raise ValueError(f"NonLocalBlock: channel count must be even, got {channels}")
            embed = channels // 2
        self.channels = channels
        self.embed = embed
        self.theta = Conv2d(channels, embed, 1)
        self.phi = Conv2d(channels, embed, 1, bias=False)
        self.g = Conv2d(channels, embed, 1)
        self.w = Conv2d(embed, channels, 1)

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"nonlocal_forward: input must be [N,C,H,W], got shape {x.shape}")
        if x.shape[1] != self.channels:
            raise ShapeError(f"nonlocal_forward: channel axis has {x.shape[1]}, block expects {self.channels}")
        m = x.shape[2] * x.shape[3]
        if m < 1:
            raise ShapeError("nonlocal_forward: need at least one spatial position")
        if m > MAX_POSITIONS:
            raise ShapeError(f"nonlocal_forward: {m} spatial positions exceed the {MAX_POSITIONS} cap "
                             f"(affinity would be {m}x{m})")

    def affinity(self, x: Tensor) -> Tensor:
        """Row-normalised pairwise affinity ``[N, M, M]``; row i weights every position j."""
        self._check(x)
        n, _, h, w = x.shape
        m = h * w
        theta = ops.transpose(ops.reshape(self.theta(x), (n, self.embed, m)), (0, 2, 1))
        phi = ops.reshape(self.phi(x), (n, self.embed, m))
        return ops.softmax_rows(ops.matmul_batched(theta, phi))

    def forward(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        attn = self.affinity(x)
        g = ops.transpose(ops.reshape(self.g(x), (n, self.embed, h * w)), (0, 2, 1))
        y = ops.matmul_batched(attn, g)
        y = ops.reshape(ops.transpose(y, (0, 2, 1)), (n, self.embed, h, w))
        return ops.add(self.w(y), x)

    def zero_projection(self) -> None:
        self.w.weight.data = np.zeros_like(self.w.weight.data)
        self.w.bias.data = np.zeros_like(self.w.bias.data)


class GLEModule(Module):
    def __init__(self, channels: int):
        self.non_local = NonLocalBlock(channels)
        self.f1 = ConvBNReLU(channels, channels)
        self.f2 = ConvBNReLU(channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.f2(self.f1(self.non_local(x)))


class GLEStack(Module):
    def __init__(self, channels: int, k: int):
        if k < 1:
            raise ValueError(f"GLEStack: depth k must be at least 1, got {k}")
        self.modules = [GLEModule(channels) for _ in range(k)]

    @property
    def k(self) -> int:
        return len(self.modules)

    def forward(self, x: Tensor) -> Tensor:
        for module in self.modules:
            x = module(x)
        return x


def nonlocal_forward(block: NonLocalBlock, x: Tensor) -> Tensor:
    return block(x)


def gle_forward(module: GLEModule, x: Tensor) -> Tensor:
    return module(x)


def stack_forward(stack: GLEStack, x: Tensor) -> Tensor:
    return stack(x)
