"""Small module system on top of the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class Module:
    training = True

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(targets) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, value in state.items():
            dest = targets[name].data if name in targets else buffers.get(name)
            if dest is None:
                raise KeyError(f"unexpected state entry {name!r}")
            value = np.asarray(value, dtype=np.float64)
            if value.shape != dest.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {dest.shape}")
            dest[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, bias=True):
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.weight = _uniform(rng, bound, (out_channels, in_channels, kernel_size))
        self.bias = _uniform(rng, bound, (out_channels,)) if bias else None

    def forward(self, x):
        return tn.conv1d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _uniform(rng, bound, (in_features, out_features))
        self.bias = _uniform(rng, bound, (out_features,))

    def forward(self, x):
        return tn.matmul(x, self.weight) + self.bias


class BatchNorm1d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return tn.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ResConv1D(Module):
    """conv-bn-act, then conv-bn with an identity skip, then act.

    The skip wraps only the second convolution, where the channel counts
    agree, so it adds no parameters.
    """

    def __init__(self, in_channels, out_channels, rng, kernel_size=5, alpha=0.01):
        self.conv1 = Conv1d(in_channels, out_channels, kernel_size, rng)
        self.bn1 = BatchNorm1d(out_channels)
        self.conv2 = Conv1d(out_channels, out_channels, kernel_size, rng)
        self.bn2 = BatchNorm1d(out_channels)
        self.alpha = alpha

    def forward(self, x):
        h = tn.leaky_relu(self.bn1(self.conv1(x)), self.alpha)
        return tn.leaky_relu(self.bn2(self.conv2(h)) + h, self.alpha)


def resconv_param_count(cin, cout, k=5):
    return k * cin * cout + cout + 2 * cout + k * cout * cout + cout + 2 * cout
