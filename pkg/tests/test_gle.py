import numpy as np
import pytest

from glefld import ops
from glefld.gle import GLEModule, GLEStack, NonLocalBlock, gle_forward, nonlocal_forward, stack_forward
from glefld.gradcheck import gradient_check
from glefld.nn import init_weights
from glefld.tensor import ShapeError, Tensor


def randomized(module, seed):
    """Random weights everywhere, including the (normally zeroed) projection."""
    rng = np.random.default_rng(seed)
    module.assign_names()
    init_weights(module, rng)
    for _, p in module.named_parameters():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    return module


def permute_positions(x, perm):
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w)[:, :, perm].reshape(n, c, h, w)


def test_zero_projection_is_identity_bitwise():
    block = randomized(NonLocalBlock(6), 0)
    block.zero_projection()
    x = np.random.default_rng(1).normal(size=(2, 6, 5, 4))
    assert nonlocal_forward(block, Tensor(x)).data.tobytes() == x.tobytes()


def test_single_position_affinity_is_one():
    block = randomized(NonLocalBlock(4), 2)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 4, 1, 1)))
    assert np.array_equal(block.affinity(x).data, np.ones((2, 1, 1)))
    expected = ops.add(block.w(block.g(x)), x)
    np.testing.assert_allclose(nonlocal_forward(block, x).data, expected.data, rtol=0, atol=1e-15)


def test_uniform_affinity_averages_g():
    block = randomized(NonLocalBlock(4), 4)
    for p in (block.theta.weight, block.theta.bias, block.phi.weight):
        p.data = np.zeros_like(p.data)
    x = Tensor(np.random.default_rng(5).normal(size=(2, 4, 3, 5)))
    attn = block.affinity(x).data
    assert np.abs(attn - 1.0 / 15).max() < 1e-15
    # hand-rolled: y at each position is the spatial mean of g(x)
    gx = block.g(x).data
    y = np.broadcast_to(gx.mean(axis=(2, 3), keepdims=True), gx.shape)
    w = block.w.weight.data[:, :, 0, 0]
    expected = np.einsum("oc,nchw->nohw", w, y) + block.w.bias.data[None, :, None, None] + x.data
    assert np.abs(nonlocal_forward(block, x).data - expected).max() < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_affinity_rows_sum_to_one(seed):
    block = randomized(NonLocalBlock(8), seed)
    x = Tensor(np.random.default_rng(seed + 100).normal(scale=3.0, size=(2, 8, 4, 6)))
    rows = block.affinity(x).data.sum(axis=-1)
    assert np.abs(rows - 1.0).max() <= 1e-9


def test_spatial_permutation_equivariance():
    rng = np.random.default_rng(7)
    block = randomized(NonLocalBlock(6), 8)
    x = rng.normal(size=(2, 6, 4, 5))
    perm = rng.permutation(20)
    out = nonlocal_forward(block, Tensor(x)).data
    out_perm = nonlocal_forward(block, Tensor(permute_positions(x, perm))).data
    assert np.abs(out_perm - permute_positions(out, perm)).max() <= 1e-10


def test_channel_mismatch_and_memory_guard():
    block = NonLocalBlock(4)
    with pytest.raises(ShapeError, match="channel"):
        nonlocal_forward(block, Tensor(np.zeros((1, 6, 2, 2))))
    with pytest.raises(ShapeError, match="4096"):
        block.affinity(Tensor(np.zeros((1, 4, 65, 64))))


def test_odd_channels_rejected():
    with pytest.raises(ValueError):
        NonLocalBlock(5)


def test_gle_preserves_shape():
    module = randomized(GLEModule(32), 0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 32, 28, 28)))
    assert gle_forward(module, x).shape == (2, 32, 28, 28)


def test_gle_with_delta_kernels_composes_bn_relu():
    # F1/F2 conv kernels are identity deltas, gamma 1, beta 0 (fresh BN)
    module = randomized(GLEModule(4), 3)
    for f in (module.f1, module.f2):
        w = np.zeros((4, 4, 3, 3))
        w[np.arange(4), np.arange(4), 1, 1] = 1.0
        f.conv.weight.data = w
        f.bn.gamma.data, f.bn.beta.data = np.ones(4), np.zeros(4)
    x = Tensor(np.random.default_rng(9).normal(size=(2, 4, 5, 5)))
    y_hat = nonlocal_forward(module.non_local, x).data

    def bn_relu(a):
        mu = a.mean(axis=(0, 2, 3), keepdims=True)
        var = a.var(axis=(0, 2, 3), keepdims=True)
        return np.maximum((a - mu) / np.sqrt(var + 1e-5), 0.0)

    module.train()
    assert np.abs(gle_forward(module, x).data - bn_relu(bn_relu(y_hat))).max() < 1e-12


def test_gle_gradient_check():
    module = randomized(GLEModule(4), 11)
    x = Tensor(np.random.default_rng(12).normal(size=(1, 4, 6, 6)))
    weights = Tensor(np.random.default_rng(13).normal(size=(1, 4, 6, 6)))
    f = lambda: ops.sum(ops.mul(gle_forward(module, x), weights))
    assert gradient_check(f, [x], eps=1e-5) < 1e-4


def test_gle_gradient_check_plain_sum():
    module = randomized(GLEModule(4), 21)
    x = Tensor(np.random.default_rng(22).normal(size=(1, 4, 6, 6)))
    assert gradient_check(lambda: ops.sum(gle_forward(module, x)), [x], eps=1e-5) < 1e-4


def test_stack_gradient_check_all_parameters():
    stack = randomized(GLEStack(4, 2), 31)
    x = Tensor(np.random.default_rng(32).normal(size=(1, 4, 6, 6)))
    weights = Tensor(np.random.default_rng(33).normal(size=(1, 4, 6, 6)))
    f = lambda: ops.sum(ops.mul(stack_forward(stack, x), weights))
    assert gradient_check(f, [x] + stack.parameters(), eps=1e-5) <= 1e-4


@pytest.mark.parametrize("k", [1, 2, 3])
def test_stack_depth(k):
    stack = GLEStack(8, k)
    assert stack.k == k and len(stack.modules) == k


def test_singleton_stack_equals_module_bitwise():
    stack = randomized(GLEStack(4, 1), 41)
    x = Tensor(np.random.default_rng(42).normal(size=(2, 4, 5, 5)))
    a = stack_forward(stack, x).data
    b = gle_forward(stack.modules[0], x).data
    assert a.tobytes() == b.tobytes()


def test_stack_rejects_zero_depth():
    with pytest.raises(ValueError):
        GLEStack(4, 0)
