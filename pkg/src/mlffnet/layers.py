"""Small layer library on top of the tensor core.

Parameters are plain Tensors held as attributes; ``Module.named_params``
walks the attribute tree in insertion order, which gives every variant a
stable parameter naming used by the optimizer and the checkpoint format.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor


class Module:
    def named_params(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}")
                    elif isinstance(item, Tensor):
                        yield (f"{name}.{i}", item)

    def set_training(self, flag):
        for val in vars(self).values():
            if isinstance(val, Module):
                val.set_training(flag)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.set_training(flag)
        if hasattr(self, "training"):
            self.training = bool(flag)

    def buffers(self, prefix=""):
        """Non-trainable state (batch-norm running stats) for checkpoints."""
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Module):
                yield from val.buffers(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.buffers(f"{name}.{i}")
            elif isinstance(val, np.ndarray):
                yield name, val

    def param_count(self):
        return sum(p.size for _, p in self.named_params())


def _fan_in_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


class Conv2d(Module):
    def __init__(self, rng, in_c, out_c, kernel, stride=1, padding=0,
                 dilation=1, bias=True):
        kh, kw = kernel if isinstance(kernel, tuple) else (kernel, kernel)
        fan_in = in_c * kh * kw
        self.weight = _fan_in_init(rng, (out_c, in_c, kh, kw), fan_in)
        self.bias = _fan_in_init(rng, (out_c,), fan_in) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride,
                        self.padding, self.dilation)


class BatchNorm2d(Module):
    """Per-channel normalization; batch stats in training, running in eval."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.training = True

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.gamma.size:
            raise ContractViolation(
                f"batchnorm: {c} channels, expected {self.gamma.size}"
            )
        if self.training:
            mu = T.reduce(x, "mean", (0, 2, 3))
            diff = x - T.broadcast_to(mu, x.shape)
            var = T.reduce(diff * diff, "mean", (0, 2, 3))
            count = n * h * w
            self.running_mean = (
                (1 - self.momentum) * self.running_mean
                + self.momentum * mu.data.reshape(c)
            )
            # unbiased running variance, per the usual convention
            unbias = count / max(count - 1, 1)
            self.running_var = (
                (1 - self.momentum) * self.running_var
                + self.momentum * var.data.reshape(c) * unbias
            )
            inv = T.elementwise(1.0, T.sqrt(var + self.eps), "div")
            xhat = diff * T.broadcast_to(inv, x.shape)
        else:
            mu = self.running_mean.reshape(1, c, 1, 1)
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            shift = Tensor((mu * inv.reshape(1, c, 1, 1)))
            xhat = x * T.broadcast_to(Tensor(inv.reshape(1, c, 1, 1)), x.shape) \
                - T.broadcast_to(shift, x.shape)
        g = T.broadcast_to(T.reshape(self.gamma, (1, c, 1, 1)), x.shape)
        b = T.broadcast_to(T.reshape(self.beta, (1, c, 1, 1)), x.shape)
        return xhat * g + b


class ConvBNReLU(Module):
    def __init__(self, rng, in_c, out_c, kernel=3, stride=1, padding=1,
                 norm="batch"):
        self.conv = Conv2d(rng, in_c, out_c, kernel, stride, padding)
        self.bn = BatchNorm2d(out_c) if norm == "batch" else None

    def forward(self, x):
        x = self.conv.forward(x)
        if self.bn is not None:
            x = self.bn.forward(x)
        return T.activation(x, "relu")
