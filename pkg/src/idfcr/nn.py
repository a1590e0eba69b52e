"""Layers and parameter containers built on the autodiff engine."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    conv2d,
    conv_transpose2d,
    group_norm,
    layer_norm,
)


class Module:
    """Container tracking Parameters through nested attributes and lists."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ValueError(
                    f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}"
                )
            p.data = state[name].astype(p.data.dtype, copy=True)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


def _kaiming(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None, bias=True, dtype=np.float32, zero_init=False):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = _kaiming(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, rng, stride=2, pad=1, bias=True, dtype=np.float32):
        self.stride = stride
        self.pad = pad
        self.weight = Parameter(_kaiming(rng, (cin, cout, k, k), cin * k * k, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, fin, fout, rng, bias=True, dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((fin, fout), dtype=dtype)
        else:
            w = _kaiming(rng, (fin, fout), fin, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(fout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps=1e-5):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)
