"""Shared test helpers: brute-force oracles and random net generation."""

from __future__ import annotations

import numpy as np

from dlcompress import nn, models
from dlcompress.nn import F32


def conv2d_bruteforce(x, weight, bias, stride, pad):
    """Loop convolution in float64. Returns (output, multiply count)."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    assert c == in_c
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    y = np.zeros((n, out_c, oh, ow))
    mults = 0
    for b in range(n):
        for oc in range(out_c):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(in_c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ic, i * stride + u, j * stride + v] \
                                    * weight[oc, ic, u, v]
                                mults += 1
                    if bias is not None:
                        acc += bias[oc]
                    y[b, oc, i, j] = acc
    return y, mults // n


def dense_bruteforce(x, weight, bias):
    """Loop matmul in float64. Returns (output, multiply count)."""
    x = np.asarray(x, dtype=np.float64)
    n, in_f = x.shape
    out_f = weight.shape[0]
    y = np.zeros((n, out_f))
    mults = 0
    for b in range(n):
        for o in range(out_f):
            acc = 0.0
            for i in range(in_f):
                acc += x[b, i] * weight[o, i]
                mults += 1
            if bias is not None:
                acc += bias[o]
            y[b, o] = acc
    return y, mults // n


def random_small_net(rng: np.random.Generator, with_residual: bool = False) -> nn.Model:
    """2-5 layer net mixing conv/dense/ReLU/BN/pool, ending in a dense head."""
    in_c = int(rng.integers(1, 3))
    size = int(rng.integers(5, 9))
    input_shape = (in_c, size, size)
    layers: list[nn.Layer] = []
    lid = 0
    cur_c, cur_h, cur_w = input_shape
    n_body = int(rng.integers(1, 4))
    for _ in range(n_body):
        choice = rng.choice(["conv", "relu", "bn", "maxpool", "avgpool"])
        if choice == "conv":
            out_c = int(rng.integers(1, 5))
            layers.append(models.conv(lid, rng, cur_c, out_c, k=3, pad=1))
            cur_c = out_c
        elif choice == "relu":
            layers.append(nn.ReLU(lid))
        elif choice == "bn":
            bn = models.batchnorm(lid, cur_c)
            bn.gamma = rng.normal(1.0, 0.2, cur_c).astype(F32)
            bn.beta = rng.normal(0.0, 0.2, cur_c).astype(F32)
            bn.running_mean = rng.normal(0.0, 0.3, cur_c).astype(F32)
            bn.running_var = rng.uniform(0.5, 1.5, cur_c).astype(F32)
            layers.append(bn)
        elif choice in ("maxpool", "avgpool") and cur_h >= 4:
            cls = nn.MaxPool if choice == "maxpool" else nn.AvgPool
            layers.append(cls(lid, kh=2, kw=2, stride=2))
            cur_h = (cur_h - 2) // 2 + 1
            cur_w = (cur_w - 2) // 2 + 1
        else:
            layers.append(nn.ReLU(lid))
        lid += 1
    if with_residual and any(isinstance(l, nn.Conv2d) for l in layers):
        layers.append(models.conv(lid, rng, cur_c, cur_c, k=3, pad=1))
        lid += 1
        layers.append(nn.ResidualAdd(lid, source_id=lid - 2))
        lid += 1
    classes = int(rng.integers(2, 5))
    layers.append(nn.Flatten(lid))
    layers.append(models.dense(lid + 1, rng, cur_c * cur_h * cur_w, classes))
    return nn.Model(layers, input_shape, classes)
