"""The standard gradient-check suite: every differentiable op, the GLE module,
a two-module GLE stack and a small toy network."""

from __future__ import annotations

from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .gle import GLEModule, GLEStack, gle_forward, stack_forward
from .gradcheck import gradient_check
from .network import NetworkConfig, build_network, forward
from .nn import Module, init_weights
from .tensor import Tensor
from .train import masked_mse_loss

OP_CASES = ("conv2d", "conv_transpose2d", "batchnorm_train", "batchnorm_eval", "relu", "softmax_rows",
            "matmul_batched", "max_pool2d", "add", "sub", "mul", "sum", "reshape_transpose", "masked_mse_loss")
COMPOSED_CASES = ("gle_module", "gle_stack", "toy_network")
CASES = OP_CASES + COMPOSED_CASES

# parameter tensors of the composed network are sampled, not exhausted
NETWORK_ENTRIES_PER_TENSOR = 6


def randomize(module: Module, rng: np.random.Generator) -> Module:
    """He init plus noise on every parameter, so zero-initialized projections
    and unit BN scales do not hide gradient errors."""
    module.assign_names()
    init_weights(module, rng)
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    return module


def _op_case(name: str, rng: np.random.Generator) -> tuple:
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    t = lambda *shape: Tensor(rng.normal(size=shape))
    if name == "conv2d":
        w, b = t(2, 3, 3, 3), t(2)
        return (lambda: ops.conv2d(x, w, b, 2, 1)), [x, w, b]
    if name == "conv_transpose2d":
        w, b = t(3, 2, 4, 4), t(2)
        return (lambda: ops.conv_transpose2d(x, w, b, 2, 1)), [x, w, b]
    if name.startswith("batchnorm"):
        g, b, stats = t(3), t(3), ops.RunningStats(3)
        stats.mean, stats.var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        training = name == "batchnorm_train"
        return (lambda: ops.batchnorm2d(x, g, b, stats, training)), [x, g, b]
    if name == "relu":
        # keep entries away from the kink so central differences are meaningful
        x.data = np.where(np.abs(x.data) < 0.05, 0.5, x.data)
        return (lambda: ops.relu(x)), [x]
    if name == "softmax_rows":
        return (lambda: ops.softmax_rows(x)), [x]
    if name == "matmul_batched":
        a, b = t(2, 3, 4), t(2, 4, 5)
        return (lambda: ops.matmul_batched(a, b)), [a, b]
    if name == "max_pool2d":
        return (lambda: ops.max_pool2d(x)), [x]
    if name == "add":
        b = t(1, 3, 1, 1)
        return (lambda: ops.add(x, b)), [x, b]
    if name == "sub":
        b = t(4)
        return (lambda: ops.sub(x, b)), [x, b]
    if name == "mul":
        b = t(3, 1, 4)
        return (lambda: ops.mul(x, b)), [x, b]
    if name == "sum":
        return (lambda: ops.sum(x)), [x]
    if name == "reshape_transpose":
        return (lambda: ops.transpose(ops.reshape(x, (2, 3, 16)), (0, 2, 1))), [x]
    if name == "masked_mse_loss":
        target = rng.normal(size=(2, 3, 4, 4))
        mask = np.array([[True, False, True], [False, True, True]])
        return (lambda: masked_mse_loss(x, target, mask)), [x]
    raise KeyError(name)


def build_case(name: str, seed: int = 0) -> tuple:
    """``(f, inputs, max_entries)`` where ``f()`` is a scalar Tensor."""
    rng = np.random.default_rng(seed)
    max_entries = None
    if name in OP_CASES:
        fwd, inputs = _op_case(name, rng)
    elif name == "gle_module":
        module = randomize(GLEModule(4), rng)
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        fwd, inputs = (lambda: gle_forward(module, x)), [x] + module.parameters()
    elif name == "gle_stack":
        stack = randomize(GLEStack(4, 2), rng)
        x = Tensor(rng.normal(size=(2, 4, 4, 4)))
        fwd, inputs = (lambda: stack_forward(stack, x)), [x] + stack.parameters()
    elif name == "toy_network":
        net = randomize(build_network(NetworkConfig(input_size=16, width=1 / 16, k=2), seed), rng)
        x = Tensor(rng.normal(size=(2, 3, 16, 16)))
        fwd, inputs = (lambda: forward(net, x, "train")), [x] + net.parameters()
        max_entries = NETWORK_ENTRIES_PER_TENSOR
    else:
        raise KeyError(f"unknown gradient-check case {name!r}")
    out_shape = fwd().shape
    if out_shape == ():
        return fwd, inputs, max_entries
    weights = Tensor(rng.normal(size=out_shape))
    return (lambda: ops.sum(ops.mul(fwd(), weights))), inputs, max_entries


def run_suite(eps: float = 1e-5, names=CASES, seed: int = 0,
              on_result: Optional[Callable[[str, float], None]] = None) -> Iterator[tuple]:
    """Yield ``(name, max_relative_error)`` for each case."""
    for name in names:
        f, inputs, max_entries = build_case(name, seed)
        err = gradient_check(f, inputs, eps, max_entries=max_entries, seed=seed)
        if on_result is not None:
            on_result(name, err)
        yield name, err
