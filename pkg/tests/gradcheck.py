"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from birdsep.autodiff import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max abs difference scaled by the largest gradient magnitude."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def check_op(build, inputs, seed=0):
    """Compare analytic and numeric gradients of sum(w * build(*inputs)).

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    out = build(*tensors)
    w = rng.standard_normal(out.shape)
    (out * Tensor(w)).sum().backward()
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [Tensor(v.astype(np.float64)) for v in inputs]
            args[i] = Tensor(xi)
            return float(np.sum(build(*args).data * w))
        worst = max(worst, rel_error(tensors[i].grad, numeric_grad(f, x)))
    return worst
