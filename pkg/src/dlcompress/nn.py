"""Minimal dense inference engine: layers, model graph, recorded forward.

Tensors are C-order float32 numpy arrays in NCHW layout. Layer math runs
in float64 and results are rounded back to float32 at every layer
boundary, so a forward pass is a pure function of (parameter bytes,
input bytes). The graph is a topologically ordered layer list; the only
non-sequential edge is ``ResidualAdd``, which sums the previous layer's
output with the recorded output of an earlier source layer.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import CorruptModel, InvalidShape

F32 = np.float32
F64 = np.float64


def as_f32(values) -> np.ndarray:
    """Coerce to a C-order float32 array (the engine's tensor type)."""
    return np.ascontiguousarray(values, dtype=F32)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    """Base layer; concrete kinds add parameters and shape rules."""

    layer_id: int

    @property
    def kind(self) -> str:
        return type(self).__name__

    def params(self) -> dict[str, np.ndarray]:
        """Learnable/stateful tensors owned by this layer, by name."""
        return {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def validate(self, in_shape: tuple[int, ...]) -> None:
        self.out_shape(in_shape)


@dataclass
class Dense(Layer):
    weight: np.ndarray  # [out, in]
    bias: np.ndarray | None = None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise InvalidShape(
                f"Dense(id={self.layer_id}) expects [{self.in_features}], got {list(in_shape)}"
            )
        return (self.out_features,)


@dataclass
class Conv2d(Layer):
    weight: np.ndarray  # [out_c, in_c, kh, kw]
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise InvalidShape(
                f"Conv2d(id={self.layer_id}) expects [{self.in_channels},h,w], got {list(in_shape)}"
            )
        _, h, w = in_shape
        kh, kw = self.weight.shape[2], self.weight.shape[3]
        oh = (h + 2 * self.pad - kh) // self.stride + 1
        ow = (w + 2 * self.pad - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise InvalidShape(
                f"Conv2d(id={self.layer_id}) kernel {kh}x{kw} too large for input {h}x{w}"
            )
        return (self.out_channels, oh, ow)


@dataclass
class BatchNorm(Layer):
    """Inference-mode affine normalization using frozen running stats."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def params(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def out_shape(self, in_shape):
        if len(in_shape) not in (1, 3) or in_shape[0] != self.channels:
            raise InvalidShape(
                f"BatchNorm(id={self.layer_id}) expects channel dim {self.channels}, got {list(in_shape)}"
            )
        return tuple(in_shape)


@dataclass
class ReLU(Layer):
    def out_shape(self, in_shape):
        return tuple(in_shape)


@dataclass
class _Pool(Layer):
    kh: int = 2
    kw: int = 2
    stride: int = 2

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise InvalidShape(
                f"{self.kind}(id={self.layer_id}) expects [c,h,w], got {list(in_shape)}"
            )
        c, h, w = in_shape
        oh = (h - self.kh) // self.stride + 1
        ow = (w - self.kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise InvalidShape(
                f"{self.kind}(id={self.layer_id}) window {self.kh}x{self.kw} too large for {h}x{w}"
            )
        return (c, oh, ow)


@dataclass
class MaxPool(_Pool):
    pass


@dataclass
class AvgPool(_Pool):
    pass


@dataclass
class Flatten(Layer):
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


@dataclass
class GlobalAvgPool(Layer):
    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise InvalidShape(
                f"GlobalAvgPool(id={self.layer_id}) expects [c,h,w], got {list(in_shape)}"
            )
        return (in_shape[0],)


@dataclass
class ResidualAdd(Layer):
    source_id: int = -1

    def out_shape(self, in_shape):
        return tuple(in_shape)


LAYER_KINDS = {
    cls.__name__: cls
    for cls in (Dense, Conv2d, BatchNorm, ReLU, MaxPool, AvgPool, Flatten,
                GlobalAvgPool, ResidualAdd)
}

#: layers whose output keeps the producing layer's channel identity
CHANNEL_PRESERVING = (BatchNorm, ReLU, MaxPool, AvgPool, ResidualAdd)

#: layers carrying prunable/quantizable weights
WEIGHTED = (Dense, Conv2d)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    class_count: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        ids = [l.layer_id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise InvalidShape(f"duplicate layer ids: {ids}")
        shapes = self.layer_shapes()
        out = shapes[self.layers[-1].layer_id]
        if out != (self.class_count,):
            raise InvalidShape(
                f"output head produces {list(out)}, expected [{self.class_count}]"
            )
        for layer in self.layers:
            if isinstance(layer, BatchNorm) and np.any(layer.running_var < 0):
                raise InvalidShape(f"BatchNorm(id={layer.layer_id}) has negative running_var")

    def layer(self, layer_id: int) -> Layer:
        for l in self.layers:
            if l.layer_id == layer_id:
                return l
        raise KeyError(layer_id)

    def index_of(self, layer_id: int) -> int:
        for i, l in enumerate(self.layers):
            if l.layer_id == layer_id:
                return i
        raise KeyError(layer_id)

    def layer_shapes(self) -> dict[int, tuple[int, ...]]:
        """Output shape per layer id (sample shape, no batch dim)."""
        shapes: dict[int, tuple[int, ...]] = {}
        cur = self.input_shape
        seen: set[int] = set()
        for layer in self.layers:
            if isinstance(layer, ResidualAdd):
                if layer.source_id not in seen:
                    raise InvalidShape(
                        f"ResidualAdd(id={layer.layer_id}) source {layer.source_id} "
                        "does not precede it"
                    )
                if shapes[layer.source_id] != cur:
                    raise InvalidShape(
                        f"ResidualAdd(id={layer.layer_id}) shapes differ: "
                        f"{list(shapes[layer.source_id])} vs {list(cur)}"
                    )
            cur = layer.out_shape(cur)
            shapes[layer.layer_id] = cur
            seen.add(layer.layer_id)
        return shapes

    def parameters(self) -> dict[tuple[int, str], np.ndarray]:
        """Flat view {(layer_id, name): array} over all layers."""
        out = {}
        for layer in self.layers:
            for name, arr in layer.params().items():
                out[(layer.layer_id, name)] = arr
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def param_bytes(self) -> bytes:
        """Concatenated little-endian parameter bytes (for restore checks)."""
        chunks = [
            np.ascontiguousarray(arr, dtype="<f4").tobytes()
            for _, arr in sorted(self.parameters().items())
        ]
        return b"".join(chunks)


def _check_params_finite(model: Model) -> None:
    for (lid, name), arr in model.parameters().items():
        if not np.all(np.isfinite(arr)):
            raise CorruptModel(f"non-finite values in layer {lid} param '{name}'")


# ---------------------------------------------------------------------------
# layer math (float64 in, float64 out)
# ---------------------------------------------------------------------------

def _pool_windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View [n,c,oh,ow,kh,kw] of pooling windows (no padding)."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[n,c,h,w] -> [n,oh,ow,c*kh*kw] patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _pool_windows(x, kh, kw, stride)  # [n,c,oh,ow,kh,kw]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)


def _col2im(gcols: np.ndarray, x_shape: tuple, kh: int, kw: int,
            stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add [n,oh,ow,c*kh*kw] back to [n,c,h,w]."""
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    g = gcols.reshape(n, oh, ow, c, kh, kw)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def _bn_scale_shift(layer: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (scale, shift) of the frozen affine transform."""
    inv = 1.0 / np.sqrt(layer.running_var.astype(F64) + layer.eps)
    scale = layer.gamma.astype(F64) * inv
    shift = layer.beta.astype(F64) - layer.running_mean.astype(F64) * scale
    return scale, shift


def _apply_layer(layer: Layer, x: np.ndarray, source: np.ndarray | None) -> np.ndarray:
    """Forward one layer on a float64 batch; returns float64."""
    if isinstance(layer, Dense):
        y = x @ layer.weight.astype(F64).T
        if layer.bias is not None:
            y = y + layer.bias.astype(F64)
        return y
    if isinstance(layer, Conv2d):
        kh, kw = layer.weight.shape[2], layer.weight.shape[3]
        cols = _im2col(x, kh, kw, layer.stride, layer.pad)
        wmat = layer.weight.astype(F64).reshape(layer.out_channels, -1)
        y = cols @ wmat.T  # [n,oh,ow,out_c]
        if layer.bias is not None:
            y = y + layer.bias.astype(F64)
        return y.transpose(0, 3, 1, 2)
    if isinstance(layer, BatchNorm):
        scale, shift = _bn_scale_shift(layer)
        if x.ndim == 4:
            return x * scale[:, None, None] + shift[:, None, None]
        return x * scale + shift
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, MaxPool):
        return _pool_windows(x, layer.kh, layer.kw, layer.stride).max(axis=(4, 5))
    if isinstance(layer, AvgPool):
        return _pool_windows(x, layer.kh, layer.kw, layer.stride).mean(axis=(4, 5))
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(2, 3))
    if isinstance(layer, ResidualAdd):
        return x + source
    raise InvalidShape(f"unknown layer kind {layer.kind}")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardRecord:
    """Per-layer input ('pre') and output ('post') float32 tensors."""

    pre: dict[int, np.ndarray] = field(default_factory=dict)
    post: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.post)


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != len(model.input_shape) + 1 or \
            tuple(batch.shape[1:]) != model.input_shape or batch.shape[0] < 1:
        raise InvalidShape(
            f"batch shape {list(batch.shape)} incompatible with input shape "
            f"[n]+{list(model.input_shape)}"
        )
    return batch


def run_layers(model: Model, batch: np.ndarray, *, round32: bool = True,
               record: ForwardRecord | None = None,
               caches: dict[int, tuple] | None = None,
               act_hook=None) -> np.ndarray:
    """Run the layer list on a batch.

    With ``round32`` every layer output is cast to float32 before f64
    recompute (the engine's canonical numeric contract); without it the
    whole pass stays float64 (training/oracle path). ``caches`` collects
    per-layer float64 (input, output) pairs for backward passes.
    ``act_hook(layer, x)`` may replace a layer's input just before a
    weighted layer consumes it (used for activation fake-quantization).
    """
    x = batch.astype(F64)
    outs: dict[int, np.ndarray] = {}
    for layer in model.layers:
        if act_hook is not None and isinstance(layer, WEIGHTED):
            x = act_hook(layer, x)
        src = outs[layer.source_id] if isinstance(layer, ResidualAdd) else None
        if record is not None:
            record.pre[layer.layer_id] = x.astype(F32)
        y = _apply_layer(layer, x, src)
        if round32:
            y = y.astype(F32).astype(F64)
        outs[layer.layer_id] = y
        if record is not None:
            record.post[layer.layer_id] = y.astype(F32)
        if caches is not None:
            caches[layer.layer_id] = (x, y)
        x = y
    return x


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits [n, class_count]; deterministic bits for identical inputs."""
    batch = _check_batch(model, batch)
    _check_params_finite(model)
    return run_layers(model, batch, round32=True).astype(F32)


def forward_recorded(model: Model, batch: np.ndarray) -> tuple[np.ndarray, ForwardRecord]:
    """Forward pass that also captures every layer's input and output."""
    batch = _check_batch(model, batch)
    _check_params_finite(model)
    rec = ForwardRecord()
    logits = run_layers(model, batch, round32=True, record=rec).astype(F32)
    return logits, rec


def replay_layer(model: Model, layer_id: int, pre: np.ndarray) -> np.ndarray:
    """Re-run one layer on a recorded input (float32 in, float32 out)."""
    layer = model.layer(layer_id)
    if isinstance(layer, ResidualAdd):
        raise InvalidShape("replay of ResidualAdd needs both inputs; use run_layers")
    return _apply_layer(layer, pre.astype(F64), None).astype(F32)


# ---------------------------------------------------------------------------
# backward rules (shared by the trainer and attribution)
# ---------------------------------------------------------------------------

def backprop_linear(layer: Layer, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a cotangent (gradient or multiplier) through a linear layer."""
    if isinstance(layer, Dense):
        return g @ layer.weight.astype(F64)
    if isinstance(layer, Conv2d):
        kh, kw = layer.weight.shape[2], layer.weight.shape[3]
        wmat = layer.weight.astype(F64).reshape(layer.out_channels, -1)
        gcols = g.transpose(0, 2, 3, 1) @ wmat  # [n,oh,ow,c*kh*kw]
        return _col2im(gcols, x.shape, kh, kw, layer.stride, layer.pad)
    if isinstance(layer, BatchNorm):
        scale, _ = _bn_scale_shift(layer)
        if x.ndim == 4:
            return g * scale[:, None, None]
        return g * scale
    if isinstance(layer, AvgPool):
        n, c, h, w = x.shape
        gx = np.zeros_like(x)
        share = g / (layer.kh * layer.kw)
        oh, ow = share.shape[2], share.shape[3]
        for i in range(layer.kh):
            for j in range(layer.kw):
                gx[:, :, i:i + layer.stride * oh:layer.stride,
                   j:j + layer.stride * ow:layer.stride] += share
        return gx
    if isinstance(layer, Flatten):
        return g.reshape(x.shape)
    if isinstance(layer, GlobalAvgPool):
        n, c, h, w = x.shape
        return np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy()
    raise InvalidShape(f"{layer.kind} is not a linear layer")


def maxpool_argmax(layer: MaxPool, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Flat within-window argmax (first occurrence) and window geometry."""
    win = _pool_windows(x, layer.kh, layer.kw, layer.stride)
    n, c, oh, ow = win.shape[:4]
    idx = win.reshape(n, c, oh, ow, -1).argmax(axis=-1)
    return idx, (n, c, oh, ow)


def maxpool_positions(layer: MaxPool, idx: np.ndarray) -> tuple:
    """Absolute (batch, channel, row, col) indices of each window argmax."""
    n, c, oh, ow = idx.shape
    di, dj = idx // layer.kw, idx % layer.kw
    oi = np.arange(oh)[None, None, :, None] * layer.stride + di
    oj = np.arange(ow)[None, None, None, :] * layer.stride + dj
    bi = np.broadcast_to(np.arange(n)[:, None, None, None], idx.shape)
    ci = np.broadcast_to(np.arange(c)[None, :, None, None], idx.shape)
    return bi, ci, oi, oj


def maxpool_scatter(layer: MaxPool, x_shape: tuple, idx: np.ndarray,
                    values: np.ndarray) -> np.ndarray:
    """Scatter-add per-window values to the argmax input positions."""
    gx = np.zeros(x_shape, dtype=values.dtype)
    np.add.at(gx, maxpool_positions(layer, idx), values)
    return gx


def layer_param_grads(layer: Layer, x: np.ndarray, g: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of trainable parameters given input x and output grad g."""
    if isinstance(layer, Dense):
        out = {"weight": g.T @ x}
        if layer.bias is not None:
            out["bias"] = g.sum(axis=0)
        return out
    if isinstance(layer, Conv2d):
        kh, kw = layer.weight.shape[2], layer.weight.shape[3]
        cols = _im2col(x, kh, kw, layer.stride, layer.pad)
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, layer.out_channels)
        gw = gmat.T @ cols.reshape(-1, cols.shape[-1])
        out = {"weight": gw.reshape(layer.weight.shape)}
        if layer.bias is not None:
            out["bias"] = g.sum(axis=(0, 2, 3))
        return out
    if isinstance(layer, BatchNorm):
        inv = 1.0 / np.sqrt(layer.running_var.astype(F64) + layer.eps)
        xhat = (x - _chan(layer.running_mean, x)) * _chan(inv, x)
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        return {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
    return {}


def _chan(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast a per-channel vector against [n,c,...] data."""
    v = v.astype(F64)
    return v[:, None, None] if like.ndim == 4 else v
