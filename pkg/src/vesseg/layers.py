"""Parameterized building blocks: plain convolution, batch norm, conv block.

Layers own named :class:`~vesseg.tensor.Parameter` objects and, for batch
norm, the running-statistics state.  Initialization draws from a caller
supplied generator so that a model built twice from the same seed is
bit-identical.
"""

from __future__ import annotations

import numpy as np

from .tensor import (BatchNormState, Parameter, Tensor, batchnorm2d, conv2d,
                     relu)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    """Uniform init on [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2dLayer:
    """A convolution with bias.  ``init="zeros"`` produces the all-zero
    weights used for offset predictors, anything else He-uniform weights."""

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int, stride: int = 1, pad: int | None = None,
                 init: str = "he", rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.name = name
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        wshape = (out_channels, in_channels, kernel, kernel)
        if init == "zeros":
            wdata = np.zeros(wshape, dtype=dtype)
        else:
            wdata = he_uniform(rng, wshape, in_channels * kernel * kernel,
                               dtype)
        self.w = Parameter(f"{name}.w", wdata, dtype=dtype)
        self.b = Parameter(f"{name}.b", np.zeros(out_channels, dtype=dtype),
                           dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class BatchNorm2d:
    """Channel-wise batch normalization with learned scale and shift."""

    def __init__(self, name: str, channels: int, dtype=np.float32):
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype),
                               dtype=dtype)
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype),
                              dtype=dtype)
        self.state = BatchNormState()

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.state, mode)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


class ConvBlock:
    """Convolution, batch norm, ReLU: the plain (non-deformable) unit."""

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int = 3, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.conv = Conv2dLayer(name, in_channels, out_channels, kernel,
                                rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(f"{name}.bn", out_channels, dtype=dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return relu(self.bn(self.conv(x), mode))

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters() + self.bn.parameters()
