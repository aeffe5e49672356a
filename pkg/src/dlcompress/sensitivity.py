"""Layer sensitivity via class-separability degradation.

A layer's sensitivity is how much distorting it (pruning a fraction of
its units, quantizing its weights, or zeroing it) collapses the class
structure of an intermediate representation, measured at a probe layer
as the standardized gap between same-class and different-class pairwise
distance distributions. Distortions are transient: the profiled model
is never modified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import nn
from .data import Dataset
from .errors import DegenerateBaseline, InsufficientClasses, UnknownLayer
from .intquant import fake_quant
from .nn import F32, F64

#: variance floor so degenerate (zero-spread) distributions stay finite
VAR_EPS = 1e-24

#: fraction of channels (by importance) kept when probing representations
TOP_FRACTION = 0.5


@dataclass
class DistortionSpec:
    """Transient distortion injected into one layer while profiling.

    kind: "prune_fraction" (zero the rho lowest-importance units),
    "quantize_bits" (symmetric weight quantization to b bits), or
    "zero_layer" (zero all parameters).
    """

    kind: str = "prune_fraction"
    rho: float = 0.5
    bits: int = 4

    KINDS = ("prune_fraction", "quantize_bits", "zero_layer")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if self.kind == "prune_fraction" and not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")
        if self.kind == "quantize_bits" and not 1 <= self.bits <= 16:
            raise ValueError("bits must be in [1, 16]")


@dataclass
class SeparabilityStats:
    same_class_distances: np.ndarray
    diff_class_distances: np.ndarray
    score: float


@dataclass
class SensitivityProfile:
    """Per-layer sensitivity in [0, 1]; input to pruning and bit search."""

    per_layer: dict[int, float]
    probe_layer_id: int
    distortion: DistortionSpec
    sample_count: int

    def to_json(self) -> dict:
        return {
            "sensitivities": {str(k): v for k, v in self.per_layer.items()},
            "probe_layer_id": self.probe_layer_id,
            "distortion": vars(self.distortion),
            "sample_count": self.sample_count,
        }


def default_probe_layer(model: nn.Model) -> int:
    """Last convolutional layer, or the final layer if there is none."""
    conv_ids = [l.layer_id for l in model.layers if isinstance(l, nn.Conv2d)]
    return conv_ids[-1] if conv_ids else model.layers[-1].layer_id


def separability_from_reps(reps: np.ndarray, labels: np.ndarray) -> SeparabilityStats:
    """Standardized mean gap between different-class and same-class
    pairwise Euclidean distances of flattened representations."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or (counts >= 2).sum() < 2:
        raise InsufficientClasses(
            "separability needs >= 2 classes with >= 2 images each"
        )
    d = pdist(reps.reshape(len(reps), -1).astype(F64))
    iu, ju = np.triu_indices(len(reps), k=1)
    same = labels[iu] == labels[ju]
    d_same, d_diff = d[same], d[~same]
    pooled = (d_diff.var() + d_same.var()) / 2.0
    score = (d_diff.mean() - d_same.mean()) / np.sqrt(pooled + VAR_EPS)
    return SeparabilityStats(d_same, d_diff, float(score))


def _probe_reps(model: nn.Model, probe_layer_id: int, sample: Dataset,
                importance, top_fraction: float) -> np.ndarray:
    """Probe-layer activations masked to the top-importance channels."""
    _, rec = nn.forward_recorded(model, sample.images)
    reps = rec.post[probe_layer_id].astype(F64)
    imp = importance.per_layer.get(probe_layer_id) if importance is not None else None
    if imp is not None and reps.ndim >= 2:
        c = reps.shape[1]
        k = max(1, int(np.ceil(top_fraction * c)))
        order = np.argsort(-np.asarray(imp), kind="stable")
        reps = reps[:, np.sort(order[:k])]
    return reps


def separability(model: nn.Model, probe_layer_id: int, sample: Dataset,
                 importance=None, top_fraction: float = TOP_FRACTION
                 ) -> SeparabilityStats:
    reps = _probe_reps(model, probe_layer_id, sample, importance, top_fraction)
    return separability_from_reps(reps, sample.labels)


def apply_distortion(model: nn.Model, layer_id: int, spec: DistortionSpec,
                     importance=None) -> nn.Model:
    """Copy of the model with the distortion applied to one layer."""
    out = model.copy()
    layer = out.layer(layer_id)
    if not isinstance(layer, nn.WEIGHTED):
        raise UnknownLayer(f"layer {layer_id} ({layer.kind}) has no weights to distort")
    if spec.kind == "zero_layer":
        layer.weight[...] = 0.0
        if layer.bias is not None:
            layer.bias[...] = 0.0
    elif spec.kind == "quantize_bits":
        bits = max(spec.bits, 2)
        layer.weight[...] = fake_quant(layer.weight, bits, "symmetric").astype(F32)
    else:  # prune_fraction
        units = layer.weight.shape[0]
        k = int(np.floor(spec.rho * units))
        if k == 0:
            return out
        if importance is not None and layer_id in importance.per_layer:
            ranking = np.asarray(importance.per_layer[layer_id], dtype=F64)
        else:
            ranking = np.abs(layer.weight).reshape(units, -1).sum(axis=1)
        dead = np.argsort(ranking, kind="stable")[:k]
        layer.weight[dead] = 0.0
        if layer.bias is not None:
            layer.bias[dead] = 0.0
    return out


def layer_sensitivity(model: nn.Model, layer_id: int, distortion: DistortionSpec,
                      sample: Dataset, importance=None,
                      probe_layer_id: int | None = None,
                      top_fraction: float = TOP_FRACTION) -> float:
    """Relative separability loss in [0, 1] caused by distorting one layer.

    When the distorted layer sits at or after the probe, the probe moves
    to the output head so the distortion stays observable.
    """
    probe = probe_layer_id if probe_layer_id is not None else default_probe_layer(model)
    if model.index_of(probe) < model.index_of(layer_id):
        probe = model.layers[-1].layer_id
    s_base = separability(model, probe, sample, importance, top_fraction).score
    if s_base <= 0:
        raise DegenerateBaseline(f"baseline separability {s_base:.4f} <= 0")
    distorted = apply_distortion(model, layer_id, distortion, importance)
    s_dist = separability(distorted, probe, sample, importance, top_fraction).score
    return float(np.clip((s_base - s_dist) / s_base, 0.0, 1.0))


def profile(model: nn.Model, distortion: DistortionSpec, sample: Dataset,
            importance=None, probe_layer_id: int | None = None,
            top_fraction: float = TOP_FRACTION) -> SensitivityProfile:
    """Sensitivity of every weighted layer; the model is left untouched."""
    probe = probe_layer_id if probe_layer_id is not None else default_probe_layer(model)
    before = model.param_bytes()
    per_layer = {
        layer.layer_id: layer_sensitivity(model, layer.layer_id, distortion,
                                          sample, importance, probe, top_fraction)
        for layer in model.layers if isinstance(layer, nn.WEIGHTED)
    }
    assert model.param_bytes() == before, "profiling must not mutate the model"
    return SensitivityProfile(per_layer, probe, distortion, len(sample))


def distributions_csv_rows(stats: SeparabilityStats) -> list[dict]:
    """Rows (distance, pair_kind) for plotting both distributions."""
    rows = [{"distance": float(d), "pair_kind": "same_class"}
            for d in stats.same_class_distances]
    rows += [{"distance": float(d), "pair_kind": "diff_class"}
             for d in stats.diff_class_distances]
    return rows
