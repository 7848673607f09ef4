"""Shared test helpers: finite-difference gradient checking in float64."""
from __future__ import annotations

import numpy as np

from tbsim import autodiff as ad
from tbsim.autodiff import Tape, Tensor, tape_context


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x (float64)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def _projection(shape) -> np.ndarray:
    """Fixed random weights so the scalarized loss is non-degenerate."""
    return np.random.default_rng(12345).standard_normal(shape)


def check_gradients(fn, inputs: list[np.ndarray], rtol: float = 1e-4, eps: float = 1e-5):
    """Compare analytic gradients of sum(W * fn(*inputs)) against central
    differences, where W is a fixed random projection. Returns the worst
    relative error over all inputs.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    with ad.default_dtype(np.float64):
        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        with tape_context(Tape()):
            out = fn(*leaves)
            w = _projection(out.shape)
            loss = ad.sum_(ad.mul(out, Tensor(w)))
            loss.backward()
        grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    for i, x in enumerate(inputs):
        def scalar_fn(xv, i=i):
            with ad.default_dtype(np.float64):
                args = [Tensor(v) for v in inputs]
                args[i] = Tensor(xv)
                out = fn(*args)
                w = _projection(out.shape)
            return float((out.data * w).sum())

        num = numeric_grad(scalar_fn, x.copy(), eps)
        denom = max(np.abs(num).max(), np.abs(grads[i]).max(), 1e-6)
        err = np.abs(grads[i] - num).max() / denom
        worst = max(worst, float(err))
    assert worst < rtol, f"gradient check failed: rel error {worst:.3e} >= {rtol}"
    return worst
