"""Central-difference gradient checker for tape-differentiated functions."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import GradTape, Tensor


class NondeterministicError(RuntimeError):
    """Raised when two identical evaluations of the checked function disagree."""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def analytic_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list:
    """Gradients of scalar ``f()`` w.r.t. each of ``inputs`` via the tape."""
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        with GradTape() as tape:
            out = f()
        tape.backward(out)
        return [np.array(t.grad) for t in inputs]
    finally:
        for t, (req, grad) in zip(inputs, saved):
            t.requires_grad = req
            t.grad = grad


def numeric_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float,
                      indices: Optional[Sequence] = None) -> list:
    """Central differences; ``indices[k]`` optionally restricts input ``k`` to
    those flat entries (others are left NaN)."""
    result = []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        g = np.full(flat.size, np.nan)
        for i in (range(flat.size) if indices is None else indices[k]):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
        result.append(g.reshape(t.shape))
    return result


def gradient_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                   max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` takes no arguments and reads ``inputs`` by closure; the checker
    perturbs ``inputs[k].data`` in place and restores it afterwards. The
    per-element error is ``|a - n| / max(1e-8, |a| + |n|)``.

    With ``max_entries`` only that many randomly chosen entries of each
    input are perturbed (all of them when the input is smaller).
    """
    if eps <= 0:
        raise ValueError("gradient_check: eps must be positive")
    first, second = f().data, f().data
    if not np.array_equal(first, second):
        raise NondeterministicError("gradient_check: two identical evaluations of f disagree")
    analytic = analytic_gradients(f, inputs)
    indices = None
    if max_entries is not None:
        rng = np.random.default_rng(seed)
        indices = [np.arange(t.size) if t.size <= max_entries else np.sort(rng.choice(t.size, max_entries, False))
                   for t in inputs]
    numeric = numeric_gradients(f, inputs, eps, indices)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = a.reshape(-1), n.reshape(-1)
        checked = ~np.isnan(n)
        if checked.any():
            worst = max(worst, float(relative_error(a[checked], n[checked]).max()))
    return worst
