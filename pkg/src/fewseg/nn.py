"""Layers, initialization, and the SGD optimizer used by the trainers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int) -> np.ndarray:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) initialization."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    """3x3 / 1x1 convolution layer with bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, *,
                 rng: np.random.Generator, name: str = "conv"):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            uniform_fan_in(rng, (out_channels, in_channels,
                                 kernel_size, kernel_size), fan_in),
            name=f"{name}.weight")
        self.bias = Parameter(uniform_fan_in(rng, (out_channels,), fan_in),
                              name=f"{name}.bias")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Linear:
    def __init__(self, in_features: int, out_features: int, *,
                 rng: np.random.Generator, name: str = "linear"):
        self.weight = Parameter(
            uniform_fan_in(rng, (out_features, in_features), in_features),
            name=f"{name}.weight")
        self.bias = Parameter(uniform_fan_in(rng, (out_features,), in_features),
                              name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(self.weight, x), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def bilinear_matrix(size_out: int, size_in: int) -> np.ndarray:
    """Interpolation matrix A with (A @ signal) bilinear along one axis.

    Output sample i reads source coordinate (i + 0.5) * size_in / size_out
    - 0.5 (half-pixel centers), clamped at the borders; each row holds the
    two linear weights.  Upsampling the trailing image axes is then two
    matrix products, which keeps the op linear and exactly transposable.
    """
    mat = np.zeros((size_out, size_in))
    scale = size_in / size_out
    for i in range(size_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), size_in - 1)
        hi_c = min(max(lo + 1, 0), size_in - 1)
        mat[i, lo_c] += 1.0 - frac
        mat[i, hi_c] += frac
    return mat


class SGD:
    """SGD with momentum and L2 weight decay (decay added to the gradient).

    `lr_multipliers` maps a parameter (by identity) to a factor applied on
    top of the schedule-provided learning rate.
    """

    def __init__(self, params: list[Parameter], momentum: float = 0.9,
                 weight_decay: float = 0.0,
                 lr_multipliers: dict[int, float] | None = None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_multipliers = lr_multipliers or {}
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * self.lr_multipliers.get(id(p), 1.0) * v
