"""Shared helpers for the test suite."""

import numpy as np


def max_rel_err(analytic, numeric):
    """Largest |a - n| / max(1, |a|, |n|) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float((np.abs(a - n) / denom).max())


def loss_grad_check(model, loss_fn, h=1e-5):
    """Compare a loss's analytic parameter gradients to central differences.

    ``loss_fn(model)`` must return a LossBatchOutput.  Returns the worst
    relative error over every parameter coordinate.
    """
    from xir.losses import dense_param_grads

    out = loss_fn(model)
    grads = dense_param_grads(model, out)
    worst = 0.0
    for name, p in model.params().items():
        g = grads[name]
        num = np.zeros_like(p)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + h
            up = loss_fn(model).loss
            p.flat[i] = orig - h
            dn = loss_fn(model).loss
            p.flat[i] = orig
            num.flat[i] = (up - dn) / (2 * h)
        worst = max(worst, max_rel_err(g, num))
    return worst
