"""Parameterized layers built on :mod:`dslnet.ops`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, reshape


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Parameter container. Parameters are the ``requires_grad`` tensors found
    on attributes; child modules (or lists of them) are walked recursively."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, spec: ops.ConvSpec, rng: np.random.Generator, *, zero_init: bool = False):
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels // spec.groups * kh * kw
        if zero_init:
            self.weight = _zeros(spec.weight_shape)
            self.bias = _zeros((spec.out_channels,)) if spec.bias else None
        else:
            self.weight = _uniform(rng, spec.weight_shape, fan_in)
            self.bias = _uniform(rng, (spec.out_channels,), fan_in) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec)


def conv(cin: int, cout: int, k: int, rng: np.random.Generator, *, stride: int = 1,
         zero_init: bool = False) -> Conv2d:
    return Conv2d(ops.ConvSpec(cin, cout, (k, k), stride=stride), rng, zero_init=zero_init)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, rng: np.random.Generator):
        if k % 2 == 0:
            raise ValueError(f"depthwise kernel size must be odd, got {k}")
        self.k = k
        self.weight = _uniform(rng, (channels, k, k), k * k)
        self.bias = _uniform(rng, (channels,), k * k)

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias)


class TransposedConv2d(Module):
    """Resolution-doubling transposed convolution (kernel 4, stride 2, padding 1)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, *, k: int = 4, stride: int = 2,
                 padding: int = 1):
        self.k, self.stride, self.padding = k, stride, padding
        self.weight = _uniform(rng, (cin, cout, k, k), cin * k * k // (stride * stride))
        self.bias = _uniform(rng, (cout,), cin * k * k // (stride * stride))

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        return ops.transposed_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                                     output_size=(h * self.stride, w * self.stride))


class DynamicConv2d(Module):
    """Depthwise k x k convolution with K candidate kernels mixed per sample.

    Attention logits come from the input itself: global average pool, 1x1 conv,
    ReLU, 1x1 conv to K logits.
    """

    def __init__(self, channels: int, k: int, n_kernels: int, rng: np.random.Generator,
                 hidden: int | None = None):
        if n_kernels < 1:
            raise ValueError("dynamic convolution needs at least one candidate kernel")
        hidden = hidden or max(channels // 4, 4)
        self.k, self.n_kernels = k, n_kernels
        self.kernels = _uniform(rng, (n_kernels, channels, k, k), k * k)
        self.bias = _uniform(rng, (channels,), k * k)
        self.attn_hidden = conv(channels, hidden, 1, rng)
        self.attn_out = conv(hidden, n_kernels, 1, rng)

    def attention_logits(self, x: Tensor) -> Tensor:
        pooled = ops.pool_global(x)
        logits = self.attn_out(ops.relu(self.attn_hidden(pooled)))
        return reshape(logits, (x.shape[0], self.n_kernels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.dynamic_conv2d(x, self.kernels, self.attention_logits(x), self.bias)


class LKRB(Module):
    """Large-kernel residual block: x + Conv3x3(ReLU(DW17(ReLU(x))))."""

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 17):
        self.dw = DepthwiseConv2d(channels, k, rng)
        self.conv = conv(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv(ops.relu(self.dw(ops.relu(x))))
