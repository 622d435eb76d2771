"""Finite-difference oracle and small fixtures shared by the test modules."""

import numpy as np

from hint.tensor import Tensor


def numeric_grad(fn, arrays, index, eps=1e-6):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        plus = fn(*arrays)
        x[i] = orig - eps
        minus = fn(*arrays)
        x[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return out


def max_rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_op_grad(build, arrays, eps=1e-6, seed=0):
    """Compare backprop against central differences for ``sum(build(*tensors) * w)``.

    A fixed random weighting ``w`` makes every output element matter. Returns
    the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[Tensor(a) for a in arrays])
    w = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*arrs):
        return float((build(*[Tensor(a) for a in arrs]).data * w).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (build(*leaves) * Tensor(w)).sum().backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(scalar, arrays, i, eps)
        worst = max(worst, max_rel_error(leaf.grad, num, floor=1e-6))
    return worst
