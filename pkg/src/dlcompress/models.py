"""Model constructors used by the demos, CLI, and test fixtures."""

from __future__ import annotations

import numpy as np

from . import nn
from .nn import F32


def he_weight(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """He-normal init; fan-in is everything but the leading output dim."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(F32)


def conv(lid: int, rng, in_c: int, out_c: int, k: int = 3, stride: int = 1,
         pad: int = 1, bias: bool = True) -> nn.Conv2d:
    b = np.zeros(out_c, dtype=F32) if bias else None
    return nn.Conv2d(lid, he_weight(rng, (out_c, in_c, k, k)), b, stride=stride, pad=pad)


def dense(lid: int, rng, in_f: int, out_f: int, bias: bool = True) -> nn.Dense:
    b = np.zeros(out_f, dtype=F32) if bias else None
    return nn.Dense(lid, he_weight(rng, (out_f, in_f)), b)


def batchnorm(lid: int, channels: int) -> nn.BatchNorm:
    return nn.BatchNorm(
        lid,
        gamma=np.ones(channels, dtype=F32),
        beta=np.zeros(channels, dtype=F32),
        running_mean=np.zeros(channels, dtype=F32),
        running_var=np.ones(channels, dtype=F32),
    )


def fixture_cnn(seed: int = 0, input_shape: tuple[int, int, int] = (1, 10, 10),
                class_count: int = 4, width: int = 8) -> nn.Model:
    """Small conv-BN-ReLU net used throughout the demos and tests.

    conv(w) -> BN -> ReLU -> maxpool2 -> conv(2w) -> BN -> ReLU -> GAP -> dense.
    The channel count of the second conv (2*width) is the usual pruning
    target; global average pooling keeps the head's channel mapping trivial.
    """
    rng = np.random.default_rng(seed)
    c_in = input_shape[0]
    layers = [
        conv(0, rng, c_in, width),
        batchnorm(1, width),
        nn.ReLU(2),
        nn.MaxPool(3, kh=2, kw=2, stride=2),
        conv(4, rng, width, 2 * width),
        batchnorm(5, 2 * width),
        nn.ReLU(6),
        nn.GlobalAvgPool(7),
        dense(8, rng, 2 * width, class_count),
    ]
    return nn.Model(layers, input_shape, class_count)


def residual_cnn(seed: int = 0, input_shape: tuple[int, int, int] = (2, 8, 8),
                 class_count: int = 3, width: int = 4) -> nn.Model:
    """Single residual block followed by a linear head."""
    rng = np.random.default_rng(seed)
    layers = [
        conv(0, rng, input_shape[0], width),
        nn.ReLU(1),
        conv(2, rng, width, width),
        nn.ResidualAdd(3, source_id=1),
        nn.ReLU(4),
        nn.GlobalAvgPool(5),
        dense(6, rng, width, class_count),
    ]
    return nn.Model(layers, input_shape, class_count)
