"""Bit-exact model file format.

Layout::

    bytes 0..3   magic b"DNET"
    bytes 4..7   uint32 little-endian JSON header length H
    bytes 8..8+H UTF-8 JSON header
    rest         little-endian float32 parameter blob

The header lists format version, input shape, class count, and for each
layer its kind, id, kind-specific attributes, and ordered parameter
shapes. The blob concatenates every parameter's raw values in header
order, so ``load_model(save_model(m))`` reproduces every byte.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import nn
from .errors import FormatError, UnsupportedVersion

MAGIC = b"DNET"
VERSION = 1

_LAYER_ATTRS = {
    "Dense": (),
    "Conv2d": ("stride", "pad"),
    "BatchNorm": ("eps",),
    "ReLU": (),
    "MaxPool": ("kh", "kw", "stride"),
    "AvgPool": ("kh", "kw", "stride"),
    "Flatten": (),
    "GlobalAvgPool": (),
    "ResidualAdd": ("source_id",),
}


def _header(model: nn.Model) -> dict:
    layers = []
    for layer in model.layers:
        entry = {"kind": layer.kind, "id": layer.layer_id}
        for attr in _LAYER_ATTRS[layer.kind]:
            entry[attr] = getattr(layer, attr)
        entry["params"] = [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in layer.params().items()
        ]
        if layer.kind in ("Dense", "Conv2d"):
            entry["has_bias"] = layer.bias is not None
        layers.append(entry)
    return {
        "version": VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": layers,
    }


def save_model(model: nn.Model, path: str | os.PathLike) -> None:
    header = json.dumps(_header(model)).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for layer in model.layers
        for arr in layer.params().values()
    )
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(header)).astype("<u4").tobytes())
        f.write(header)
        f.write(blob)


def load_model(path: str | os.PathLike) -> nn.Model:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r} at offset 0, expected {MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"truncated header length field at offset 4 (file is {len(raw)} bytes)")
    hlen = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if len(raw) < 8 + hlen:
        raise FormatError(f"truncated header at offset 8: need {hlen} bytes, have {len(raw) - 8}")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header at offset 8: {exc}") from exc
    if header.get("version") != VERSION:
        raise UnsupportedVersion(
            f"format version {header.get('version')!r}, supported: {VERSION}"
        )

    blob = raw[8 + hlen:]
    expected = sum(
        int(np.prod(p["shape"])) for l in header["layers"] for p in l["params"]
    ) * 4
    if len(blob) != expected:
        raise FormatError(
            f"parameter blob is {len(blob)} bytes, header describes {expected}"
        )

    offset = 0
    layers = []
    for entry in header["layers"]:
        kind = entry["kind"]
        if kind not in _LAYER_ATTRS:
            raise FormatError(f"unknown layer kind {kind!r}")
        arrays = {}
        for p in entry["params"]:
            count = int(np.prod(p["shape"]))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            arrays[p["name"]] = np.ascontiguousarray(arr.reshape(p["shape"]), dtype=nn.F32)
            offset += count * 4
        layers.append(_build_layer(kind, entry, arrays))
    return nn.Model(layers, tuple(header["input_shape"]), header["class_count"])


def _build_layer(kind: str, entry: dict, arrays: dict) -> nn.Layer:
    lid = entry["id"]
    if kind == "Dense":
        return nn.Dense(lid, arrays["weight"], arrays.get("bias"))
    if kind == "Conv2d":
        return nn.Conv2d(lid, arrays["weight"], arrays.get("bias"),
                         stride=entry["stride"], pad=entry["pad"])
    if kind == "BatchNorm":
        return nn.BatchNorm(lid, arrays["gamma"], arrays["beta"],
                            arrays["running_mean"], arrays["running_var"],
                            eps=entry["eps"])
    if kind == "ReLU":
        return nn.ReLU(lid)
    if kind in ("MaxPool", "AvgPool"):
        cls = nn.MaxPool if kind == "MaxPool" else nn.AvgPool
        return cls(lid, kh=entry["kh"], kw=entry["kw"], stride=entry["stride"])
    if kind == "Flatten":
        return nn.Flatten(lid)
    if kind == "GlobalAvgPool":
        return nn.GlobalAvgPool(lid)
    return nn.ResidualAdd(lid, source_id=entry["source_id"])
