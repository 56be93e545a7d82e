"""Central finite-difference checks for the tape."""

from __future__ import annotations

import numpy as np

from .tensor import Tape


def _analytic(f, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(out)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def _fd(f, p, flat_index, h):
    view = p.data.reshape(-1)
    orig = view[flat_index]
    view[flat_index] = orig + h
    fp = f().item()
    view[flat_index] = orig - h
    fm = f().item()
    view[flat_index] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError("non-finite value during finite differencing")
    return (fp - fm) / (2.0 * h)


def rel_error(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def grad_check(f, x, h=1e-5):
    """Max relative error between tape gradients of ``f(x)`` and central differences.

    Relative error per coordinate is ``|a - fd| / max(1, |a|)``.
    """
    if not x.requires_grad:
        x.requires_grad = True
    return grad_check_params(lambda: f(x), [x], h=h)


def grad_check_params(f, params, h=1e-5, max_coords=None, rng=None):
    """Like :func:`grad_check` for a closure over several parameter tensors.

    With ``max_coords`` only that many randomly chosen coordinates per tensor
    are differenced; the analytic gradient is still computed in full.
    """
    grads = _analytic(f, params)
    worst = 0.0
    for p, g in zip(params, grads):
        n = p.size
        if max_coords is not None and n > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        flat_g = g.reshape(-1)
        for c in coords:
            worst = max(worst, rel_error(flat_g[c], _fd(f, p, c, h)))
    return worst
