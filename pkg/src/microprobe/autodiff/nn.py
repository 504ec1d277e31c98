"""Tiny layer library on top of the autodiff tensor."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter, Tensor, conv2d


class Module:
    """Base class that collects Parameters from attributes, recursively."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        found = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                found.append((name, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(prefix=name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        found.append((f"{name}.{i}", item))
                    elif isinstance(item, Module):
                        found.extend(item.named_parameters(prefix=f"{name}.{i}."))
        return found

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map y = x @ W + b with uniform(-1/sqrt(fan_in)) init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, name: str = "linear"):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    """Stride-1 zero-padded convolution over (C,H,W) inputs."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 padding: int = 0, name: str = "conv"):
        fan_in = c_in * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(c_out, c_in, kernel, kernel)),
            name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias")
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class FeedForward(Module):
    """Two-layer MLP with ReLU in between."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int,
                 rng: np.random.Generator, name: str = "ffn"):
        self.fc1 = Linear(n_in, n_hidden, rng, name=f"{name}.fc1")
        self.fc2 = Linear(n_hidden, n_out, rng, name=f"{name}.fc2")

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())
