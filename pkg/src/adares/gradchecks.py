"""Finite-difference checks for every tape op and for the full training loss."""

from __future__ import annotations

import numpy as np

from .autodiff import tensor as tn
from .autodiff.gradcheck import grad_check_params
from .autodiff.nn import BatchNorm1d
from .autodiff.tensor import Tensor
from .diffres import DiffResConfig, FrameImportanceNet, diffres_forward
from .harness.models import ToyClassifier
from .losses import LossConfig, bce_loss, guide_loss, total_loss

OP_TOL = 1e-6
END_TO_END_TOL = 1e-4


def scale_grad(x, factor):
    """Identity in the forward pass, gradient scaled by ``factor`` (test hook)."""
    x = tn.as_tensor(x)
    return tn._make(x.data.copy(), (x,), lambda g: (g * factor,))


def _op_cases(rng):
    """name -> (function of the inputs, list of input arrays)."""
    r = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    away = lambda *s: np.sign(r(s)) * rng.uniform(0.2, 1.5, s)  # noqa: E731 (keeps clear of kinks)
    bn_train = BatchNorm1d(3)
    bn_eval = BatchNorm1d(3)
    bn_eval.running_mean[:] = r(3)
    bn_eval.running_var[:] = pos(3)
    bn_eval.eval()
    idx = rng.integers(0, 6, size=(2, 1, 4))
    return {
        "add": (lambda a, b: a + b, [r((3, 4)), r((4,))]),
        "sub": (lambda a, b: a - b, [r((3, 4)), r((3, 1))]),
        "mul": (lambda a, b: a * b, [r((3, 4)), r((3, 4))]),
        "div": (lambda a, b: a / b, [r((3, 4)), pos(3, 4)]),
        "scalar_ops": (lambda a: (2.5 * a - 1.0) / 4.0 + 3.0, [r((5,))]),
        "power": (lambda a: tn.power(a, 2.5), [pos(5)]),
        "exp": (lambda a: tn.exp(a), [r((5,))]),
        "log": (lambda a: tn.log(a), [pos(5)]),
        "sigmoid": (lambda a: tn.sigmoid(a), [r((6,)) * 3]),
        "leaky_relu": (lambda a: tn.leaky_relu(a, 0.01), [away(6)]),
        "matmul": (lambda a, b: tn.matmul(a, b), [r((2, 3, 4)), r((4, 5))]),
        "conv1d_same": (lambda x, w, b: tn.conv1d(x, w, b), [r((2, 3, 7)), r((4, 3, 5)), r((4,))]),
        "batchnorm_train": (lambda x, g, b: tn.batch_norm(
            x, g, b, bn_train.running_mean, bn_train.running_var, True), [r((4, 3, 5)), pos(3), r((3,))]),
        "batchnorm_eval": (lambda x, g, b: tn.batch_norm(
            x, g, b, bn_eval.running_mean, bn_eval.running_var, False), [r((4, 3, 5)), pos(3), r((3,))]),
        "sum": (lambda a: tn.sum_(a), [r((3, 4))]),
        "sum_axis": (lambda a: tn.sum_(a, axis=1, keepdims=True), [r((3, 4))]),
        "mean": (lambda a: tn.mean(a), [r((3, 4))]),
        "mean_axis": (lambda a: tn.mean(a, axis=0), [r((3, 4))]),
        "max": (lambda a: tn.max_(a), [r((3, 4))]),
        "max_axis": (lambda a: tn.max_(a, axis=1), [r((3, 4))]),
        "cumsum": (lambda a: tn.cumsum(a, axis=1), [r((3, 4))]),
        "concat": (lambda a, b: tn.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        "stack": (lambda a, b: tn.stack([a, b], axis=0), [r((2, 3)), r((2, 3))]),
        "slice": (lambda a: a[1:, ::2], [r((3, 5))]),
        "transpose": (lambda a: tn.transpose(a), [r((2, 3, 4))]),
        "reshape": (lambda a: tn.reshape(a, (4, 3)), [r((3, 4))]),
        "clamp_min": (lambda a: tn.clamp_min(a, 0.0), [away(6)]),
        "maximum_const": (lambda a: tn.maximum(a, 1.0), [1.0 + away(6)]),
        "clamp": (lambda a: tn.clamp(a, -0.5, 0.5), [np.array([-1.0, -0.3, 0.1, 0.4, 0.9])]),
        "take_along_axis": (lambda a: tn.take_along_axis(a, idx, axis=2), [r((2, 3, 6))]),
    }


def check_ops(seed=0, h=1e-5, corrupt=None):
    """Relative error of each op's VJP against central differences."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, (fn, arrays) in _op_cases(rng).items():
        params = [Tensor(a, requires_grad=True) for a in arrays]
        probe = fn(*[Tensor(a) for a in arrays])
        weights = rng.standard_normal(probe.shape)

        def f(fn=fn, params=params, weights=weights, name=name):
            out = fn(*params)
            if name == corrupt:
                out = scale_grad(out, 1.5)
            return tn.sum_(out * weights)

        err = grad_check_params(f, params, h=h)
        results[name] = {"error": err, "tol": OP_TOL, "passed": bool(err < OP_TOL)}
    return results


def end_to_end_problem(bins=8, frames=32, seed=0, delta=0.5, n_classes=4):
    """Random instance of the full loss as a closure over the DiffRes parameters."""
    rng = np.random.default_rng(seed)
    net = FrameImportanceNet(bins, rng)
    clf = ToyClassifier(3, bins, n_classes, rng, width=8)
    cfg = DiffResConfig(delta=delta)
    X = rng.standard_normal((2, bins, frames))
    energy = np.where(rng.uniform(size=(2, frames)) < 0.4, 1e-6, rng.uniform(0.01, 1.0, (2, frames)))
    y = np.eye(n_classes)[rng.integers(0, n_classes, size=2)]
    loss_cfg = LossConfig(delta, cfg.lam, cfg.epsilon)

    def loss():
        out = diffres_forward(X, net, cfg)
        probs = clf(out.channels())
        return total_loss(bce_loss(probs, y), guide_loss(out.s, energy, loss_cfg))

    return loss, net.parameters()


def check_end_to_end(bins=8, frames=32, seed=0, h=1e-5, max_coords=6, corrupt=None):
    loss, params = end_to_end_problem(bins, frames, seed)
    f = (lambda: scale_grad(loss(), 1.5)) if corrupt == "end_to_end" else loss
    err = grad_check_params(f, params, h=h, max_coords=max_coords,
                            rng=np.random.default_rng(seed + 1))
    return {"error": err, "tol": END_TO_END_TOL, "passed": bool(err < END_TO_END_TOL)}


def run_all(bins=8, frames=32, seed=0, corrupt=None):
    checks = check_ops(seed, corrupt=corrupt)
    checks["end_to_end"] = check_end_to_end(bins, frames, seed, corrupt=corrupt)
    return {"passed": all(c["passed"] for c in checks.values()), "checks": checks}
