"""Dense reverse-mode differentiation over numpy float64 arrays.

Operations run eagerly. While a :class:`Tape` is active on the current
thread, every op whose inputs require gradients appends a node holding the
vector-Jacobian product closure. ``Tape.backward`` replays those nodes in
reverse execution order, which is a valid reverse topological order.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Record of differentiable operations in execution order."""

    def __init__(self):
        self.nodes = []
        self._produced = set()
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out, inputs, vjp):
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self.nodes.append((out, inputs, vjp))
        self._produced.add(id(out))

    def reset(self):
        self.nodes = []
        self._produced = set()
        self._consumed = False

    @property
    def leaves(self):
        """Tensors requiring grad that were consumed but not produced on this tape."""
        seen = {}
        for _, inputs, _ in self.nodes:
            for x in inputs:
                if isinstance(x, Tensor) and x.requires_grad and id(x) not in self._produced:
                    seen.setdefault(id(x), x)
        return list(seen.values())

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape without reset()")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ValueError("loss must be a scalar Tensor")
        self._consumed = True
        if id(loss) not in self._produced:
            if loss.requires_grad:
                loss._accumulate(np.ones_like(loss.data))
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for x, gx in zip(inputs, vjp(g)):
                if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                    continue
                if id(x) in self._produced:
                    prev = grads.get(id(x))
                    grads[id(x)] = gx if prev is None else prev + gx
                else:
                    x._accumulate(gx)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, vjp):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    tape = current_tape()
    needs = tape is not None and any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        tape.record(out, inputs, vjp)
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * out / b.data, b.shape)))


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)  # _make rejects the non-finite result
    return _make(out, (a,), lambda g: (g / a.data,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, alpha=0.01):
    a = as_tensor(a)
    if not 0.0 <= alpha < 1.0:
        raise ValueError("leaky_relu slope must lie in [0, 1)")
    out = np.maximum(a.data, alpha * a.data)

    def vjp(g):
        return (np.where(a.data > 0, g, alpha * g),)

    return _make(out, (a,), vjp)


def clamp_min(a, lo=0.0):
    """``max(a, lo)``; the gradient passes only where ``a > lo``."""
    a = as_tensor(a)
    keep = a.data > lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def maximum(a, c):
    """Elementwise max with a constant ``c``; ties route to the constant."""
    return clamp_min(a, c)


def clamp(a, lo, hi):
    a = as_tensor(a)
    keep = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * keep,))


# linear algebra

def matmul(a, b):
    """Batched matrix product for operands of rank >= 2 with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a, axes=None):
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# reductions

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / n,))


def max_(a, axis=None, keepdims=False):
    """Max reduction; the gradient goes to the first (lowest-index) argmax."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))
        out = np.asarray(a.data.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * a.ndim)

        def vjp(g):
            z = np.zeros(a.data.size)
            z[flat] = np.reshape(g, ())
            return (z.reshape(a.shape),)

        return _make(out, (a,), vjp)
    if axis < 0:
        axis += a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def vjp(g):
        z = np.zeros(a.shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(z, idx, gk, axis=axis)
        return (z,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), vjp)


def cumsum(a, axis=-1):
    a = as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp)


# structural

def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), vjp)


def getitem(a, key):
    a = as_tensor(a)

    def vjp(g):
        z = np.zeros(a.shape)
        np.add.at(z, key, g)
        return (z,)

    return _make(np.array(a.data[key]), (a,), vjp)


def take_along_axis(a, indices, axis):
    """Gather ``a`` along ``axis``; backward scatter-adds into the source."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)
    if axis < 0:
        axis += a.ndim

    def vjp(g):
        grid = list(np.ogrid[tuple(slice(n) for n in g.shape)])
        grid[axis] = indices
        grid = np.broadcast_arrays(*grid)
        lin = np.ravel_multi_index(tuple(grid), a.shape)
        z = np.bincount(lin.ravel(), weights=g.ravel(), minlength=a.data.size)
        return (z.reshape(a.shape),)

    return _make(out, (a,), vjp)


# convolution and normalization

def conv1d(x, weight, bias=None):
    """Stride-1 1-D convolution with zero "same" padding.

    x: (N, C_in, T), weight: (C_out, C_in, k) with k odd, bias: (C_out,).
    Cross-correlation, as in most deep learning libraries. One GEMM of all
    taps against the zero-padded input laid out as (C_in, N * T_pad), then a
    shifted sum over taps.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError("conv1d expects x (N, C, T) and weight (O, C, k)")
    n, cin, T = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ValueError(f"conv1d channel mismatch: input {cin}, weight {wcin}")
    if k % 2 != 1:
        raise ValueError("conv1d 'same' padding needs an odd kernel")
    p = k // 2
    Tp = T + 2 * p
    xp = np.zeros((cin, n, Tp))
    xp[:, :, p:p + T] = x.data.transpose(1, 0, 2)
    xp = xp.reshape(cin, n * Tp)
    wk = weight.data.transpose(2, 0, 1).reshape(k * cout, cin)
    Y = (wk @ xp).reshape(k, cout, n, Tp)
    out = Y[0, :, :, 0:T].copy()
    for j in range(1, k):
        out += Y[j, :, :, j:j + T]
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None, None]
        inputs = (x, weight, bias)

    def vjp(g):
        gt = g.transpose(1, 0, 2)
        dY = np.zeros((k, cout, n, Tp))
        for j in range(k):
            dY[j, :, :, j:j + T] = gt
        dY = dY.reshape(k * cout, n * Tp)
        gw = (dY @ xp.T).reshape(k, cout, cin).transpose(1, 2, 0)
        gx = (wk.T @ dY).reshape(cin, n, Tp)[:, :, p:p + T].transpose(1, 0, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _make(out.transpose(1, 0, 2), inputs, vjp)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N, C) or (N, C, T) input.

    In training mode batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place with the unbiased variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    g_ = gamma.data.reshape(bshape)
    if training:
        m = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if m > 1:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * m / (m - 1)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)

        def vjp(g):
            dxhat = g * g_
            gx = (invstd.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        invstd = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * invstd).reshape(bshape)
        shift = (beta.data - running_mean * gamma.data * invstd).reshape(bshape)

        def vjp(g):
            xhat = (x.data - running_mean.reshape(bshape)) * invstd.reshape(bshape)
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _make(x.data * scale + shift, (x, gamma, beta), vjp)

    out = xhat * g_ + beta.data.reshape(bshape)
    return _make(out, (x, gamma, beta), vjp)
