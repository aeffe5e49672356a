"""MAC and parameter (NP) accounting per layer, optionally mask-aware.

One MAC is one multiply-accumulate; exports report FLOPs as 2x MACs.
With a prune mask, dead units leave both the producing layer's output
factor and every consumer's input factor, so structured masking shows
up in the counts exactly as physical removal would.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidShape, ZeroCost

FLOPS_PER_MAC = 2


@dataclass
class CostProfile:
    macs: dict[int, int]
    nps: dict[int, int]
    mask_aware: bool

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_nps(self) -> int:
        return sum(self.nps.values())

    def total(self, criteria: str) -> int:
        return self.total_macs if criteria == "macs" else self.total_nps

    def per_layer(self, criteria: str) -> dict[int, int]:
        return self.macs if criteria == "macs" else self.nps


def _alive_counts(mask, lid: int, full: int) -> int:
    """Alive output units of a layer under a unit-granularity mask."""
    if mask is None or getattr(mask, "granularity", None) == "weight":
        return full
    keep = mask.keep.get(lid)
    return int(keep.sum()) if keep is not None else full


def _kept_weights(mask, lid: int, weight: np.ndarray) -> int:
    keep = mask.keep.get(lid)
    return int(keep.sum()) if keep is not None else weight.size


def profile_cost(model: nn.Model, input_shape=None, masks=None,
                 count_residual_adds: bool = False) -> CostProfile:
    """Per-layer MACs and NPs. ``masks`` may be a PruneMask at unit or
    weight granularity; unit masks shrink consumer input factors too."""
    input_shape = tuple(input_shape) if input_shape is not None else model.input_shape
    if input_shape != model.input_shape:
        raise InvalidShape(
            f"input shape {list(input_shape)} != model input {list(model.input_shape)}"
        )
    shapes = model.layer_shapes()
    weight_level = masks is not None and getattr(masks, "granularity", None) == "weight"

    macs: dict[int, int] = {}
    nps: dict[int, int] = {}
    outs_alive: dict[int, int] = {}
    alive = input_shape[0]  # alive units along the current tensor's axis 1
    prev_shape: tuple = input_shape

    for layer in model.layers:
        lid = layer.layer_id
        shape = shapes[lid]
        m = n = 0
        if isinstance(layer, nn.Conv2d):
            kh, kw = layer.weight.shape[2:]
            oh, ow = shape[1], shape[2]
            out_alive = _alive_counts(masks, lid, layer.out_channels)
            if weight_level:
                kept = _kept_weights(masks, lid, layer.weight)
                n = kept + (layer.out_channels if layer.bias is not None else 0)
                m = kept * oh * ow
            else:
                n = out_alive * alive * kh * kw + (out_alive if layer.bias is not None else 0)
                m = oh * ow * out_alive * alive * kh * kw
            alive = out_alive if not weight_level else layer.out_channels
        elif isinstance(layer, nn.Dense):
            out_alive = _alive_counts(masks, lid, layer.out_features)
            if weight_level:
                kept = _kept_weights(masks, lid, layer.weight)
                n = kept + (layer.out_features if layer.bias is not None else 0)
                m = kept
            else:
                n = out_alive * alive + (out_alive if layer.bias is not None else 0)
                m = out_alive * alive
            alive = out_alive if not weight_level else layer.out_features
        elif isinstance(layer, nn.BatchNorm):
            spatial = int(np.prod(shape[1:])) if len(shape) == 3 else 1
            n = 2 * alive
            m = 2 * alive * spatial
        elif isinstance(layer, nn.Flatten):
            spatial = int(np.prod(prev_shape[1:])) if len(prev_shape) == 3 else 1
            alive = alive * spatial
        elif isinstance(layer, nn.ResidualAdd) and count_residual_adds:
            m = alive * (int(np.prod(shape[1:])) if len(shape) == 3 else 1)
        # ReLU / pools / GAP / plain residual: zero MACs, zero NPs
        macs[lid] = int(m)
        nps[lid] = int(n)
        outs_alive[lid] = alive
        if isinstance(layer, nn.ResidualAdd):
            # both branches expose the same alive channels by construction
            alive = min(alive, outs_alive[layer.source_id])
        prev_shape = shape
    return CostProfile(macs=macs, nps=nps, mask_aware=masks is not None)


def load_vector(profile: CostProfile, criteria: str) -> dict[int, float]:
    """Per-layer share of total cost, normalized to sum 1."""
    per_layer = profile.per_layer(_norm_criteria(criteria))
    total = sum(per_layer.values())
    if total == 0:
        raise ZeroCost(f"model has zero total {criteria}")
    return {lid: v / total for lid, v in per_layer.items()}


def _norm_criteria(criteria: str) -> str:
    c = criteria.lower()
    if c not in ("macs", "nps"):
        raise ValueError(f"criteria must be 'macs' or 'nps', got {criteria!r}")
    return c


def profile_rows(profile: CostProfile, model: nn.Model) -> list[dict]:
    """Plot-ready rows (layer, kind, macs, flops, nps)."""
    return [
        {
            "layer_id": layer.layer_id,
            "kind": layer.kind,
            "macs": profile.macs[layer.layer_id],
            "flops": FLOPS_PER_MAC * profile.macs[layer.layer_id],
            "nps": profile.nps[layer.layer_id],
        }
        for layer in model.layers
    ]
