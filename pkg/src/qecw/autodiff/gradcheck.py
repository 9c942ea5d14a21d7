"""Central finite-difference gradient checker (float64)."""

import numpy as np

from . import ops
from .tensor import Tensor


def check_gradients(fn, arrays, seed=0, h=1e-3):
    """Max error of analytic vs numeric gradients of sum(fn(*inputs) * R), relative to max(1, |g|)."""
    rng = np.random.default_rng(seed)
    inputs = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape)
    loss = ops.sum_all(ops.mul(out, weights))
    loss.backward()

    def value(vals):
        ts = [Tensor(v) for v in vals]
        return float((fn(*ts).data * weights).sum())

    worst = 0.0
    vals = [t.data.copy() for t in inputs]
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = vals[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value(vals)
            flat[i] = orig - h
            down = value(vals)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
